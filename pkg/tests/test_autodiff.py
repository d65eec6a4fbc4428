"""Tensor-core unit tests: frozen examples, finite-difference gradient
properties (20+ seeds per operator), adjointness, and error contracts."""

import numpy as np
import pytest

import mednet.autodiff as ad
from mednet.autodiff import Graph, RunningStats, Tensor
from mednet.errors import DomainError, GraphError, NonFiniteError

from helpers import check_op_gradient, numeric_grad, rel_err

SEEDS = list(range(20))


def rand(rng, *shape):
    return rng.standard_normal(shape)


# ---------------------------------------------------------------------------
# frozen examples


def test_relu_example():
    out = ad.relu(Tensor([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out.values, [0.0, 0.0, 2.0])


def test_elementwise_mul_identity_and_gradient_to_ones():
    rng = np.random.default_rng(0)
    x = rand(rng, 2, 3)
    ones = Tensor(np.ones((2, 3)), requires_grad=True)
    with Graph() as g:
        out = ad.elementwise_mul(Tensor(x), ones)
        g.backward(out.sum())
    np.testing.assert_array_equal(out.values, x)
    np.testing.assert_array_equal(ones.grad, x)


def test_concat_channels_widths_and_backward_split():
    rng = np.random.default_rng(1)
    a = Tensor(rand(rng, 2, 2, 3, 3), requires_grad=True)
    b = Tensor(rand(rng, 2, 3, 3, 3), requires_grad=True)
    ct = rand(rng, 2, 5, 3, 3)
    with Graph() as g:
        out = ad.concat_channels([a, b])
        g.backward((out * Tensor(ct)).sum())
    assert out.shape == (2, 5, 3, 3)
    np.testing.assert_array_equal(a.grad, ct[:, :2])
    np.testing.assert_array_equal(b.grad, ct[:, 2:])


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(2)
    x = rand(rng, 1, 1, 3, 3)
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    out = ad.conv2d(Tensor(x), Tensor(w), stride=1)
    np.testing.assert_allclose(out.values, x, atol=1e-15)


def test_conv2d_stride2_corner_coverage():
    x = np.ones((1, 1, 4, 4))
    w = np.ones((1, 1, 3, 3))
    out = ad.conv2d(Tensor(x), Tensor(w), stride=2)
    assert out.shape == (1, 1, 2, 2)
    # top-left output sits on the padded border: only a 2x2 piece of the
    # receptive field overlaps the image
    assert out.values[0, 0, 0, 0] == pytest.approx(4.0)
    assert out.values[0, 0, 1, 1] == pytest.approx(9.0)


def test_transposed_conv2d_single_pixel_expansion():
    v = 3.25
    x = np.full((1, 1, 1, 1), v)
    w = np.ones((1, 1, 2, 2))
    out = ad.transposed_conv2d(Tensor(x), Tensor(w), stride=2)
    assert out.shape == (1, 1, 2, 2)
    np.testing.assert_allclose(out.values, v)


@pytest.mark.parametrize("seed", range(5))
def test_conv_transposed_conv_adjointness(seed):
    rng = np.random.default_rng(seed)
    x = rand(rng, 2, 3, 8, 8)
    w = rand(rng, 4, 3, 3, 3)           # conv: 3 -> 4 channels
    y = rand(rng, 2, 4, 4, 4)
    lhs = float((ad.conv2d(Tensor(x), Tensor(w), stride=2).values * y).sum())
    rhs = float((ad.transposed_conv2d(Tensor(y), Tensor(w), stride=2).values * x).sum())
    assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


def test_batch_norm_constant_channel_gives_beta():
    x = np.full((2, 3, 4, 4), 7.0)
    gamma = Tensor(np.ones(3))
    beta = Tensor(np.array([0.5, -1.0, 2.0]))
    out = ad.batch_norm(Tensor(x), gamma, beta, RunningStats(3), "train")
    for c in range(3):
        np.testing.assert_allclose(out.values[:, c], beta.values[c], atol=1e-12)


def test_batch_norm_train_normalizes():
    rng = np.random.default_rng(3)
    # sample variance must dwarf eps=1e-5 for the output variance to sit
    # within 1e-6 of 1 (normalized variance is var/(var+eps))
    x = 5.0 + 10.0 * rand(rng, 4, 2, 8, 8)
    out = ad.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                        RunningStats(2), "train")
    mean = out.values.mean(axis=(0, 2, 3))
    var = out.values.var(axis=(0, 2, 3))
    np.testing.assert_allclose(mean, 0.0, atol=1e-8)
    np.testing.assert_allclose(var, 1.0, atol=1e-6)


def test_batch_norm_eval_uses_running_stats():
    stats = RunningStats(1)
    stats.mean[:] = 2.0
    stats.var[:] = 4.0
    x = np.full((1, 1, 2, 2), 4.0)
    out = ad.batch_norm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)),
                        stats, "eval")
    np.testing.assert_allclose(out.values, (4.0 - 2.0) / np.sqrt(4.0 + 1e-5))
    # eval mode must not touch the stats
    assert stats.mean[0] == 2.0 and stats.var[0] == 4.0


def test_batch_norm_running_stats_update():
    rng = np.random.default_rng(4)
    x = rand(rng, 2, 2, 4, 4)
    stats = RunningStats(2)
    ad.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), stats, "train")
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    np.testing.assert_allclose(stats.mean, 0.1 * mu, atol=1e-14)
    np.testing.assert_allclose(stats.var, 0.9 * 1.0 + 0.1 * var, atol=1e-14)


def test_channel_softmax_uniform_logits():
    out = ad.channel_softmax(Tensor(np.zeros((1, 6, 2, 2))))
    np.testing.assert_allclose(out.values, 1.0 / 6.0, atol=1e-15)


def test_channel_softmax_large_logits_stable():
    x = np.zeros((1, 2, 1, 1))
    x[0, 0] = 1000.0
    out = ad.channel_softmax(Tensor(x))
    np.testing.assert_allclose(out.values[0, 0], 1.0)
    np.testing.assert_allclose(out.values[0, 1], 0.0)


def test_downsample2x_avg_example():
    x = np.array([[1.0, 3.0], [5.0, 7.0]]).reshape(1, 1, 2, 2)
    out = ad.downsample2x_avg(Tensor(x))
    np.testing.assert_allclose(out.values, [[[[4.0]]]])


def test_resampling_preserves_constants():
    x = np.full((1, 2, 4, 4), 2.5)
    up = ad.upsample2x_bilinear(Tensor(x))
    down = ad.downsample2x_avg(Tensor(x))
    np.testing.assert_allclose(up.values, 2.5, atol=1e-12)
    np.testing.assert_allclose(down.values, 2.5, atol=1e-12)
    roundtrip = ad.upsample2x_bilinear(ad.downsample2x_avg(Tensor(x)))
    np.testing.assert_allclose(roundtrip.values, 2.5, atol=1e-12)


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Graph() as g:
        g.backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_quadratic_gives_2x():
    rng = np.random.default_rng(5)
    xv = rand(rng, 3, 4)
    x = Tensor(xv, requires_grad=True)
    with Graph() as g:
        g.backward((x * x).sum())
    np.testing.assert_allclose(x.grad, 2.0 * xv, atol=1e-14)


def test_backward_fan_out_accumulates():
    # z = x + x reused twice: loss = sum(z*z) = sum(4 x^2) -> grad 8x
    xv = np.array([1.0, -2.0, 0.5])
    x = Tensor(xv, requires_grad=True)
    with Graph() as g:
        z = x + x
        g.backward((z * z).sum())
    np.testing.assert_allclose(x.grad, 8.0 * xv, atol=1e-14)


# ---------------------------------------------------------------------------
# finite-difference property suite, >= 20 seeds per operator


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_elementwise_ops(seed):
    rng = np.random.default_rng(seed)
    a = rand(rng, 2, 3, 4)
    b = rand(rng, 2, 3, 4)
    b = np.where(np.abs(b) < 0.5, b + np.sign(b) + 0.5, b)   # safe divisor
    for op in (ad.add, ad.sub, ad.elementwise_mul, ad.div):
        for wrt in (0, 1):
            assert check_op_gradient(op, [a, b], wrt, rng) < 1e-6, op.__name__
    scalar = np.array([1.3])
    assert check_op_gradient(ad.add, [a, scalar], 1, rng) < 1e-6
    assert check_op_gradient(ad.elementwise_mul, [scalar, a], 0, rng) < 1e-6


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_nonlinear_ops(seed):
    rng = np.random.default_rng(100 + seed)
    x = rand(rng, 3, 5)
    x = np.where(np.abs(x) < 1e-2, x + 0.1, x)   # keep away from kinks
    assert check_op_gradient(ad.relu, [x], 0, rng) < 1e-4
    assert check_op_gradient(ad.absolute, [x], 0, rng) < 1e-4
    positive = 0.1 + np.abs(x)
    assert check_op_gradient(ad.log, [positive], 0, rng) < 1e-6


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_reductions_and_shape_ops(seed):
    rng = np.random.default_rng(200 + seed)
    x = rand(rng, 2, 3, 4, 4)
    for op in (lambda t: ad.reduce_sum(t),
               lambda t: ad.reduce_sum(t, axes=(1, 3)),
               lambda t: ad.reduce_sum(t, axes=2, keepdims=True),
               lambda t: ad.reduce_mean(t),
               lambda t: ad.reduce_mean(t, axes=(0, 2)),
               lambda t: ad.crop2d(t, top=1, bottom=0, left=1, right=2)):
        assert check_op_gradient(op, [x], 0, rng) < 1e-6
    a = rand(rng, 2, 2, 4, 4)
    assert check_op_gradient(lambda u, v: ad.concat_channels([u, v]), [a, x], 0, rng) < 1e-6
    assert check_op_gradient(lambda u, v: ad.concat_channels([u, v]), [a, x], 1, rng) < 1e-6


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_conv2d(seed):
    rng = np.random.default_rng(300 + seed)
    x = rand(rng, 1, 2, 5, 5)
    for k, stride, cout in ((3, 1, 3), (3, 2, 2), (1, 1, 4), (5, 2, 2)):
        w = rand(rng, cout, 2, k, k)
        b = rand(rng, cout)
        op = lambda xx, ww, bb: ad.conv2d(xx, ww, bb, stride=stride)
        for wrt in (0, 1, 2):
            err = check_op_gradient(op, [x, w, b], wrt, rng)
            assert err < 1e-6, f"k={k} stride={stride} wrt={wrt}: {err}"


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_transposed_conv2d(seed):
    rng = np.random.default_rng(400 + seed)
    x = rand(rng, 2, 3, 4, 4)
    for k in (2, 3):
        w = rand(rng, 3, 2, k, k)
        b = rand(rng, 2)
        op = lambda xx, ww, bb: ad.transposed_conv2d(xx, ww, bb, stride=2)
        for wrt in (0, 1, 2):
            err = check_op_gradient(op, [x, w, b], wrt, rng)
            assert err < 1e-6, f"k={k} wrt={wrt}: {err}"


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_batch_norm(seed):
    rng = np.random.default_rng(500 + seed)
    x = 2.0 + rand(rng, 3, 2, 4, 4)
    gamma = 1.0 + 0.2 * rand(rng, 2)
    beta = rand(rng, 2)
    for mode in ("train", "eval"):
        stats = RunningStats(2)
        stats.mean[:] = rand(rng, 2)
        stats.var[:] = 1.0 + 0.5 * np.abs(rand(rng, 2))
        op = lambda xx, gg, bb: ad.batch_norm(xx, gg, bb, stats, mode)
        for wrt in (0, 1, 2):
            err = check_op_gradient(op, [x, gamma, beta], wrt, rng)
            assert err < 1e-5, f"mode={mode} wrt={wrt}: {err}"


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_softmax_and_resampling(seed):
    rng = np.random.default_rng(600 + seed)
    x = rand(rng, 2, 3, 4, 4)
    assert check_op_gradient(ad.channel_softmax, [x], 0, rng) < 1e-6
    assert check_op_gradient(ad.upsample2x_bilinear, [x], 0, rng) < 1e-6
    assert check_op_gradient(ad.downsample2x_avg, [x], 0, rng) < 1e-6


# ---------------------------------------------------------------------------
# structural invariants


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_simplex_invariant(seed):
    rng = np.random.default_rng(700 + seed)
    x = 10.0 * rand(rng, 2, 5, 3, 3)
    p = ad.channel_softmax(Tensor(x)).values
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    assert (p >= 0.0).all() and (p <= 1.0).all()


@pytest.mark.parametrize("h,w,k", [(5, 7, 1), (6, 6, 3), (9, 4, 5), (8, 8, 7)])
def test_conv2d_stride1_preserves_shape(h, w, k):
    rng = np.random.default_rng(h * 100 + w * 10 + k)
    x = rand(rng, 1, 2, h, w)
    wt = rand(rng, 3, 2, k, k)
    assert ad.conv2d(Tensor(x), Tensor(wt), stride=1).shape == (1, 3, h, w)


@pytest.mark.parametrize("h,k,s", [(5, 3, 2), (4, 5, 2), (7, 3, 3), (10, 1, 4)])
def test_conv2d_output_is_ceil_division(h, k, s):
    rng = np.random.default_rng(h + k + s)
    x = rand(rng, 1, 1, h, h)
    wt = rand(rng, 1, 1, k, k)
    out = ad.conv2d(Tensor(x), Tensor(wt), stride=s)
    assert out.shape[2] == -(-h // s)


def test_eval_mode_records_nothing():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    out = ad.relu(x + 1.0)          # no active graph: plain numpy evaluation
    assert out._index == -1 and not out.requires_grad
    with Graph() as g:
        y = ad.relu(Tensor(np.ones((2, 2))) + 1.0)   # no requires_grad parent
        assert len(g.nodes) == 0 and not y.requires_grad


def test_gradients_accumulate_across_graphs():
    x = Tensor(np.array([2.0]), requires_grad=True)
    for _ in range(2):
        with Graph() as g:
            g.backward((x * x).sum())
    np.testing.assert_allclose(x.grad, 8.0)   # 4 + 4
    x.zero_grad()
    np.testing.assert_allclose(x.grad, 0.0)


# ---------------------------------------------------------------------------
# error contracts


def test_backward_twice_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    with Graph() as g:
        loss = (x * x).sum()
        g.backward(loss)
        with pytest.raises(GraphError):
            g.backward(loss)


def test_backward_non_scalar_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    with Graph() as g:
        y = x * x
        with pytest.raises(DomainError):
            g.backward(y)


def test_non_finite_tensor_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        Tensor(np.inf)


def test_shape_errors():
    a, b = Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2)))
    for op in (ad.add, ad.sub, ad.elementwise_mul, ad.div):
        with pytest.raises(DomainError):
            op(a, b)
    x44 = Tensor(np.ones((1, 1, 4, 4)))
    with pytest.raises(DomainError):      # channel mismatch
        ad.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(DomainError):      # even kernel
        ad.conv2d(x44, Tensor(np.ones((1, 1, 2, 2))))
    with pytest.raises(DomainError):      # non-positive stride
        ad.conv2d(x44, Tensor(np.ones((1, 1, 3, 3))), stride=0)
    with pytest.raises(DomainError):      # unknown padding
        ad.conv2d(x44, Tensor(np.ones((1, 1, 3, 3))), padding="valid")
    with pytest.raises(DomainError):      # tconv supports stride 2 only
        ad.transposed_conv2d(x44, Tensor(np.ones((1, 1, 2, 2))), stride=3)
    with pytest.raises(DomainError):      # concat extent mismatch
        ad.concat_channels([x44, Tensor(np.ones((1, 1, 5, 5)))])
    with pytest.raises(DomainError):      # crop of the full extent
        ad.crop2d(x44, top=2, bottom=2)
    with pytest.raises(DomainError):      # odd extent downsample
        ad.downsample2x_avg(Tensor(np.ones((1, 1, 3, 4))))
    with pytest.raises(DomainError):      # bn channel mismatch
        ad.batch_norm(x44, Tensor(np.ones(2)), Tensor(np.zeros(2)),
                      RunningStats(2), "train")
    with pytest.raises(DomainError):      # bn unknown mode
        ad.batch_norm(x44, Tensor(np.ones(1)), Tensor(np.zeros(1)),
                      RunningStats(1), "test")
    with pytest.raises(DomainError):      # softmax needs >= 2 channels
        ad.channel_softmax(x44)
    with pytest.raises(DomainError):
        ad.log(Tensor([0.0, 1.0]))
    with pytest.raises(DomainError):
        Tensor(np.ones(3)).item()
