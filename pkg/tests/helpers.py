"""Shared oracles for the test suite: finite differences and brute-force
metric recounts, kept independent of the library implementations they check.
"""

from __future__ import annotations

import numpy as np

from mednet.autodiff import Graph, Tensor


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Relative error between two gradient arrays, scale-normalized."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(analytic.ravel()), np.linalg.norm(numeric.ravel()), 1e-30)
    return float(np.linalg.norm((analytic - numeric).ravel()) / denom)


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar-valued f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def analytic_grad(op, arrays: list[np.ndarray], wrt: int,
                  cotangent: np.ndarray | None = None):
    """Gradient of sum(op(*arrays) * cotangent) w.r.t. arrays[wrt]."""
    tensors = [Tensor(a, requires_grad=(i == wrt)) for i, a in enumerate(arrays)]
    with Graph() as g:
        out = op(*tensors)
        ct = np.ones(out.shape) if cotangent is None else cotangent
        loss = (out * Tensor(ct)).sum()
        g.backward(loss)
    return tensors[wrt].grad.copy(), out.values.copy()


def check_op_gradient(op, arrays: list[np.ndarray], wrt: int, rng: np.random.Generator,
                      h: float = 1e-5) -> float:
    """Relative error between analytic and FD gradients of a random scalar
    projection of op's output, w.r.t. arrays[wrt]."""
    probe_out = op(*[Tensor(a) for a in arrays])
    ct = rng.standard_normal(probe_out.shape)

    ga, _ = analytic_grad(op, arrays, wrt, ct)

    def scalar(x):
        args = [Tensor(x if i == wrt else a) for i, a in enumerate(arrays)]
        return float((op(*args).values * ct).sum())

    gn = numeric_grad(scalar, arrays[wrt].copy(), h=h)
    return rel_err(ga, gn)


def brute_force_confusion(pred: np.ndarray, gt: np.ndarray, classes: int,
                          ignore: int = 255):
    """Pixel-by-pixel one-vs-rest counting with explicit Python loops."""
    tp = [0] * classes
    fp = [0] * classes
    tn = [0] * classes
    fn = [0] * classes
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if g == ignore:
            continue
        for k in range(classes):
            if g == k and p == k:
                tp[k] += 1
            elif g == k and p != k:
                fn[k] += 1
            elif g != k and p == k:
                fp[k] += 1
            else:
                tn[k] += 1
    return tp, fp, tn, fn


def scalar_mdsc(one_hot: np.ndarray, valid: np.ndarray, pred: np.ndarray,
                epsilon: float) -> float:
    """Straight-line transcription of the masked Dice + complement formula:
    per item, sum over classes; batch mean.  No shared code with the library.
    """
    B, K = one_hot.shape[:2]
    total = 0.0
    for b in range(B):
        m = valid[b, 0]
        item = 0.0
        for k in range(K):
            L = one_hot[b, k][m > 0]
            Y = pred[b, k][m > 0]
            num = 2.0 * float((L * Y).sum())
            den = float((L * L).sum() + (Y * Y).sum()) + epsilon
            item += 1.0 - num / den
            Lc, Yc = 1.0 - L, 1.0 - Y
            num = 2.0 * float((Lc * Yc).sum())
            den = float((Lc * Lc).sum() + (Yc * Yc).sum()) + epsilon
            item += 1.0 - num / den
        total += item
    return total / B


def scalar_tv(pred: np.ndarray) -> float:
    """Forward-difference total variation, batch mean, explicit loops."""
    B, K, H, W = pred.shape
    total = 0.0
    for b in range(B):
        for k in range(K):
            for i in range(H):
                for j in range(W):
                    if i + 1 < H:
                        total += abs(pred[b, k, i + 1, j] - pred[b, k, i, j])
                    if j + 1 < W:
                        total += abs(pred[b, k, i, j + 1] - pred[b, k, i, j])
    return total / B
