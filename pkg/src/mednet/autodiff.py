"""Dense float64 tensors with taped reverse-mode differentiation.

Everything runs in double precision: the point of this core is that every
operator's analytic gradient can be checked against central finite
differences, not throughput.  Ops record onto the innermost active
:class:`Graph` (a tape in forward execution order); without an active graph
they are plain numpy computations, which is how inference runs.
"""

from __future__ import annotations

import threading
from functools import lru_cache

import numpy as np

from .errors import DomainError, GraphError, NonFiniteError

_tls = threading.local()


def _graph_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = _tls.stack = []
    return stack


def _active_graph():
    stack = _graph_stack()
    return stack[-1] if stack else None


class Tensor:
    """N-dimensional float64 array, optionally tracked for gradients.

    ``grad`` exists iff ``requires_grad``; the buffer itself is materialized
    on first touch so transient activations never pay for one.  All values
    must be finite.
    """

    __slots__ = ("values", "requires_grad", "_grad", "_index")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor holds NaN/Inf values")
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self._index = -1  # creation position on the recording tape; -1 = leaf

    @property
    def grad(self):
        if not self.requires_grad:
            return None
        if self._grad is None:
            self._grad = np.zeros_like(self.values)
        return self._grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def zero_grad(self) -> None:
        if self._grad is not None:
            self._grad[...] = 0.0

    def item(self) -> float:
        if self.values.size != 1:
            raise DomainError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def sum(self, axes=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axes=axes, keepdims=keepdims)

    def mean(self, axes=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axes=axes, keepdims=keepdims)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return elementwise_mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return elementwise_mul(self, -1.0)

    def __abs__(self):
        return absolute(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class Graph:
    """Recording tape; backward walks the nodes in exact reverse order.

    A graph is single-use: a second ``backward`` raises.  Gradients
    accumulate additively into every ``requires_grad`` leaf; callers reset
    them explicitly via ``zero_grad``.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _graph_stack().pop()
        assert popped is self

    def _append(self, out: Tensor, parents: tuple[Tensor, ...], backward_fn) -> None:
        out._index = len(self.nodes)
        self.nodes.append(_Node(out, parents, backward_fn))

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise GraphError("backward called twice on the same graph; zero_grad and rebuild")
        if loss.size != 1:
            raise DomainError(f"backward seed must be scalar, got shape {loss.shape}")
        self._consumed = True
        if not np.isfinite(loss.values).all():
            raise NonFiniteError("loss is not finite")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
        for pos in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[pos]
            if node.out._index != pos or any(p._index >= pos for p in node.parents):
                raise GraphError("tape is not topologically ordered (graph cycle)")
            gout = grads.pop(id(node.out), None)
            if gout is None:
                continue  # does not feed the loss
            for parent, contrib in zip(node.parents, node.backward_fn(gout)):
                if contrib is None:
                    continue
                if parent.requires_grad and parent._index == -1:
                    parent.grad[...] += contrib
                elif parent._index != -1:
                    acc = grads.get(id(parent))
                    if acc is None:
                        grads[id(parent)] = np.array(contrib, dtype=np.float64, copy=True)
                    else:
                        acc += contrib
        if loss._index == -1 and loss.requires_grad:
            loss.grad[...] += np.ones_like(loss.values)


def backward(graph: Graph, loss: Tensor) -> None:
    """Reverse-mode sweep seeding d(loss)/d(loss) = 1."""
    graph.backward(loss)


def _record(values: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    graph = _active_graph()
    track = graph is not None and any(p.requires_grad for p in parents)
    out = Tensor(values, requires_grad=track)
    if track:
        graph._append(out, parents, backward_fn)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DomainError(f"{op} requires identical shapes, got {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DomainError(f"add requires identical shapes, got {a.shape} vs {b.shape}")

    def bwd(g):
        ga = g if a.size != 1 else np.array([g.sum()]).reshape(a.shape)
        gb = g if b.size != 1 else np.array([g.sum()]).reshape(b.shape)
        return ga, gb

    return _record(a.values + b.values, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DomainError(f"sub requires identical shapes, got {a.shape} vs {b.shape}")

    def bwd(g):
        ga = g if a.size != 1 else np.array([g.sum()]).reshape(a.shape)
        gb = -g if b.size != 1 else np.array([-g.sum()]).reshape(b.shape)
        return ga, gb

    return _record(a.values - b.values, (a, b), bwd)


def elementwise_mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DomainError(f"mul requires identical shapes, got {a.shape} vs {b.shape}")
    av, bv = a.values, b.values

    def bwd(g):
        ga = g * bv if a.size != 1 else np.array([(g * bv).sum()]).reshape(a.shape)
        gb = g * av if b.size != 1 else np.array([(g * av).sum()]).reshape(b.shape)
        return ga, gb

    return _record(av * bv, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DomainError(f"div requires identical shapes, got {a.shape} vs {b.shape}")
    av, bv = a.values, b.values

    def bwd(g):
        ga = g / bv if a.size != 1 else np.array([(g / bv).sum()]).reshape(a.shape)
        gbv = -g * av / (bv * bv)
        gb = gbv if b.size != 1 else np.array([gbv.sum()]).reshape(b.shape)
        return ga, gb

    return _record(av / bv, (a, b), bwd)


def relu(x: Tensor) -> Tensor:
    xv = x.values

    def bwd(g):
        return (g * (xv > 0.0),)

    return _record(np.maximum(xv, 0.0), (x,), bwd)


def absolute(x: Tensor) -> Tensor:
    # subgradient 0 at exact ties
    xv = x.values

    def bwd(g):
        return (g * np.sign(xv),)

    return _record(np.abs(xv), (x,), bwd)


def log(x: Tensor) -> Tensor:
    xv = x.values
    if (xv <= 0.0).any():
        raise DomainError("log requires strictly positive values")

    def bwd(g):
        return (g / xv,)

    return _record(np.log(xv), (x,), bwd)


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(a % ndim for a in axes)


def reduce_sum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axes(axes, x.ndim)
    out = x.values.sum(axis=ax, keepdims=keepdims)
    if out.ndim == 0:
        out = out.reshape(1) if not keepdims else out

    def bwd(g):
        gg = g
        if not keepdims:
            shape = list(x.shape)
            for a in ax:
                shape[a] = 1
            gg = g.reshape(shape)
        return (np.broadcast_to(gg, x.shape),)

    return _record(out, (x,), bwd)


def reduce_mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axes(axes, x.ndim)
    n = 1
    for a in ax:
        n *= x.shape[a]
    return elementwise_mul(reduce_sum(x, axes=ax, keepdims=keepdims), 1.0 / n)


def concat_channels(tensors: list[Tensor]) -> Tensor:
    if not tensors:
        raise DomainError("concat_channels of empty list")
    first = tensors[0]
    for t in tensors:
        if t.ndim != 4:
            raise DomainError("concat_channels expects 4-D tensors")
        if (t.shape[0], t.shape[2], t.shape[3]) != (first.shape[0], first.shape[2], first.shape[3]):
            raise DomainError(f"concat_channels B/H/W mismatch: {t.shape} vs {first.shape}")
    widths = [t.shape[1] for t in tensors]
    offsets = np.cumsum([0] + widths)

    def bwd(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(tensors)))

    return _record(np.concatenate([t.values for t in tensors], axis=1), tuple(tensors), bwd)


def crop2d(x: Tensor, top: int = 0, bottom: int = 0, left: int = 0, right: int = 0) -> Tensor:
    if x.ndim != 4:
        raise DomainError("crop2d expects a 4-D tensor")
    B, C, H, W = x.shape
    if top + bottom >= H or left + right >= W:
        raise DomainError("crop2d removes the full extent")

    def bwd(g):
        gx = np.zeros((B, C, H, W))
        gx[:, :, top:H - bottom, left:W - right] = g
        return (gx,)

    return _record(x.values[:, :, top:H - bottom, left:W - right], (x,), bwd)


# ---------------------------------------------------------------------------
# convolution family (square odd kernels, zero "same" padding)


def _conv_geometry(height: int, width: int, k: int, stride: int) -> tuple[int, int, int]:
    pad = (k - 1) // 2
    h_out = (height + 2 * pad - k) // stride + 1
    w_out = (width + 2 * pad - k) // stride + 1
    return pad, h_out, w_out


# The three conv kernels run as k*k shifted matrix products instead of one
# big im2col tensordot: peak temporaries stay at one (B,C,Ho,Wo) slab rather
# than the k^2-fold column matrix, which dominates time at 128px inputs.


def _pad2d(x: np.ndarray, pad: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x


def _conv_fwd(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    B, C, H, W = x.shape
    cout, _, k, _ = w.shape
    h_out = (H + 2 * pad - k) // stride + 1
    w_out = (W + 2 * pad - k) // stride + 1
    xp = _pad2d(x, pad)
    acc = np.zeros((B, h_out, w_out, cout))
    for i in range(k):
        for j in range(k):
            view = xp[:, :, i:i + h_out * stride:stride, j:j + w_out * stride:stride]
            acc += np.tensordot(view, w[:, :, i, j], axes=([1], [1]))
    return np.ascontiguousarray(acc.transpose(0, 3, 1, 2))


def _conv_bwd_input(g: np.ndarray, w: np.ndarray, stride: int, pad: int,
                    x_shape: tuple[int, ...]) -> np.ndarray:
    B, C, H, W = x_shape
    k = w.shape[2]
    _, _, h_out, w_out = g.shape
    gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1))  # (B,Ho,Wo,Cout)
    gxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    for i in range(k):
        for j in range(k):
            contrib = np.tensordot(gt, w[:, :, i, j], axes=([3], [0]))  # (B,Ho,Wo,Cin)
            gxp[:, :, i:i + h_out * stride:stride,
                j:j + w_out * stride:stride] += contrib.transpose(0, 3, 1, 2)
    return gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp


def _conv_bwd_weight(x: np.ndarray, g: np.ndarray, stride: int, pad: int,
                     w_shape: tuple[int, ...]) -> np.ndarray:
    k = w_shape[2]
    _, _, h_out, w_out = g.shape
    xp = _pad2d(x, pad)
    gw = np.empty(w_shape)
    for i in range(k):
        for j in range(k):
            view = xp[:, :, i:i + h_out * stride:stride, j:j + w_out * stride:stride]
            gw[:, :, i, j] = np.tensordot(g, view, axes=([0, 2, 3], [0, 2, 3]))
    return gw


def _validate_conv_args(x: Tensor, w: Tensor, bias, stride: int, padding: str,
                        even_ok: bool = False) -> None:
    if x.ndim != 4 or w.ndim != 4:
        raise DomainError("conv expects 4-D input and weight")
    if w.shape[2] != w.shape[3]:
        raise DomainError(f"kernel must be square, got {w.shape[2]}x{w.shape[3]}")
    if not even_ok and w.shape[2] % 2 == 0:
        raise DomainError(f"kernel size must be odd, got {w.shape[2]}")
    if not isinstance(stride, int) or stride < 1:
        raise DomainError(f"stride must be a positive int, got {stride!r}")
    if padding != "same":
        raise DomainError(f"only 'same' padding is supported, got {padding!r}")
    if bias is not None and bias.ndim != 1:
        raise DomainError("bias must be 1-D")


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """Cross-correlation with zero 'same' padding; output is ceil(H/stride)."""
    _validate_conv_args(x, w, bias, stride, padding)
    if x.shape[1] != w.shape[1]:
        raise DomainError(f"channel mismatch: input {x.shape[1]} vs weight {w.shape[1]}")
    if bias is not None and bias.shape[0] != w.shape[0]:
        raise DomainError(f"bias size {bias.shape[0]} vs {w.shape[0]} output channels")
    k = w.shape[2]
    pad, _, _ = _conv_geometry(x.shape[2], x.shape[3], k, stride)
    xv, wv = x.values, w.values
    y = _conv_fwd(xv, wv, stride, pad)
    if bias is None:
        def bwd(g):
            return (_conv_bwd_input(g, wv, stride, pad, xv.shape),
                    _conv_bwd_weight(xv, g, stride, pad, wv.shape))

        return _record(y, (x, w), bwd)

    def bwd_b(g):
        return (_conv_bwd_input(g, wv, stride, pad, xv.shape),
                _conv_bwd_weight(xv, g, stride, pad, wv.shape),
                g.sum(axis=(0, 2, 3)))

    return _record(y + bias.values.reshape(1, -1, 1, 1), (x, w, bias), bwd_b)


def transposed_conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None,
                      stride: int = 2) -> Tensor:
    """Adjoint of conv2d used as a learnable upsampler; output is stride * H.

    Weight layout is (in_channels, out_channels, k, k); even kernels are
    allowed (k=2 is the natural non-overlapping x2 kernel).
    """
    _validate_conv_args(x, w, bias, stride, "same", even_ok=True)
    if stride != 2:
        raise DomainError(f"transposed_conv2d supports stride 2 only, got {stride}")
    if x.shape[1] != w.shape[0]:
        raise DomainError(f"channel mismatch: input {x.shape[1]} vs weight {w.shape[0]}")
    if bias is not None and bias.shape[0] != w.shape[1]:
        raise DomainError(f"bias size {bias.shape[0]} vs {w.shape[1]} output channels")
    B, _, H, W = x.shape
    c_out = w.shape[1]
    k = w.shape[2]
    pad = (k - 1) // 2
    out_shape = (B, c_out, stride * H, stride * W)
    xv, wv = x.values, w.values
    y = _conv_bwd_input(xv, wv, stride, pad, out_shape)
    if bias is not None:
        y = y + bias.values.reshape(1, -1, 1, 1)

    def bwd(g):
        gx = _conv_fwd(g, wv, stride, pad)
        gw = _conv_bwd_weight(g, xv, stride, pad, wv.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if bias is None else (x, w, bias)
    return _record(y, parents, bwd)


# ---------------------------------------------------------------------------
# batch normalization


class RunningStats:
    """Mutable per-channel EMA of batch mean/variance for eval mode."""

    __slots__ = ("mean", "var")

    def __init__(self, channels: int):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats,
               mode: str, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    if x.ndim != 4:
        raise DomainError("batch_norm expects a 4-D tensor")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,) or stats.mean.shape != (C,):
        raise DomainError(f"batch_norm channel mismatch for input with {C} channels")
    n = B * H * W
    if n == 0:
        raise DomainError("batch_norm on an empty batch")
    if mode not in ("train", "eval"):
        raise DomainError(f"mode must be 'train' or 'eval', got {mode!r}")
    xv, gv, bv = x.values, gamma.values, beta.values

    if mode == "eval":
        inv = 1.0 / np.sqrt(stats.var + eps)
        xhat = (xv - stats.mean.reshape(1, C, 1, 1)) * inv.reshape(1, C, 1, 1)
        y = gv.reshape(1, C, 1, 1) * xhat + bv.reshape(1, C, 1, 1)

        def bwd_eval(g):
            gx = g * (gv * inv).reshape(1, C, 1, 1)
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return _record(y, (x, gamma, beta), bwd_eval)

    mu = xv.mean(axis=(0, 2, 3))
    var = xv.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu.reshape(1, C, 1, 1)) * inv.reshape(1, C, 1, 1)
    y = gv.reshape(1, C, 1, 1) * xhat + bv.reshape(1, C, 1, 1)
    stats.mean = (1.0 - momentum) * stats.mean + momentum * mu
    stats.var = (1.0 - momentum) * stats.var + momentum * var

    def bwd_train(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gv.reshape(1, C, 1, 1)
        s1 = gxhat.sum(axis=(0, 2, 3)).reshape(1, C, 1, 1)
        s2 = (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, C, 1, 1)
        gx = (gxhat - s1 / n - xhat * s2 / n) * inv.reshape(1, C, 1, 1)
        return gx, ggamma, gbeta

    return _record(y, (x, gamma, beta), bwd_train)


# ---------------------------------------------------------------------------
# softmax and resampling


def channel_softmax(x: Tensor) -> Tensor:
    """Per-pixel softmax over the channel axis, max-subtracted for stability."""
    if x.ndim != 4:
        raise DomainError("channel_softmax expects a 4-D tensor")
    if x.shape[1] < 2:
        raise DomainError(f"channel_softmax needs >= 2 classes, got {x.shape[1]}")
    z = x.values - x.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _record(p, (x,), bwd)


@lru_cache(maxsize=None)
def _bilinear_matrix(n: int) -> np.ndarray:
    # align_corners=False: output o samples input coordinate (o + 0.5)/2 - 0.5
    out = np.zeros((2 * n, n))
    for o in range(2 * n):
        src = (o + 0.5) / 2.0 - 0.5
        i0 = int(np.floor(src))
        frac = src - i0
        i0c = min(max(i0, 0), n - 1)
        i1c = min(max(i0 + 1, 0), n - 1)
        out[o, i0c] += 1.0 - frac
        out[o, i1c] += frac
    return out


def upsample2x_bilinear(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DomainError("upsample2x_bilinear expects a 4-D tensor")
    _, _, H, W = x.shape
    uh = _bilinear_matrix(H)
    uw = _bilinear_matrix(W)
    tmp = np.einsum("oh,bchw->bcow", uh, x.values, optimize=True)
    y = np.einsum("pw,bcow->bcop", uw, tmp, optimize=True)

    def bwd(g):
        t = np.einsum("pw,bcop->bcow", uw, g, optimize=True)
        return (np.einsum("oh,bcow->bchw", uh, t, optimize=True),)

    return _record(y, (x,), bwd)


def downsample2x_avg(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DomainError("downsample2x_avg expects a 4-D tensor")
    _, _, H, W = x.shape
    if H % 2 or W % 2:
        raise DomainError(f"downsample2x_avg needs even extents, got {H}x{W}")
    xv = x.values
    y = 0.25 * (xv[:, :, 0::2, 0::2] + xv[:, :, 1::2, 0::2]
                + xv[:, :, 0::2, 1::2] + xv[:, :, 1::2, 1::2])

    def bwd(g):
        return (0.25 * np.repeat(np.repeat(g, 2, axis=2), 2, axis=3),)

    return _record(y, (x,), bwd)
