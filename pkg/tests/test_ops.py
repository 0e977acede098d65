import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from conftest import GRAD_SEEDS
from medusa import ops
from medusa.gradcheck import grad_check, grad_check_params
from medusa.tensor import ConfigError, Parameter, ShapeError, Tensor, backward, fresh_tape


def param(arr, name="p"):
    return Parameter(np.asarray(arr, dtype=np.float64), name)


# ---------------------------------------------------------------------------
# conv2d


def test_conv_ones_example():
    x = Tensor(np.ones((1, 1, 3, 3)))
    k = Tensor(np.ones((1, 1, 3, 3)))
    out = ops.conv2d(x, k, Tensor(np.zeros(1)), 1, "same")
    assert np.array_equal(out.data[0, 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def test_conv_identity_kernel(rng):
    x = Tensor(rng.standard_normal((2, 1, 5, 6)))
    out = ops.conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    assert np.array_equal(out.data, x.data)


@pytest.mark.parametrize("stride,padding", [(2, "same"), (1, "same"), (1, "valid"), (2, "valid")])
def test_conv_matches_loop_oracle(rng, stride, padding):
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding)
    ref = oracles.conv2d(x, w, b, stride, 1 if padding == "same" else 0)
    assert out.shape == ref.shape
    assert np.max(np.abs(out.data - ref)) < 1e-12


def test_conv_errors(rng):
    x = Tensor(rng.standard_normal((1, 2, 5, 5)))
    with pytest.raises(ShapeError):
        ops.conv2d(x, Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ConfigError):
        ops.conv2d(x, Tensor(np.ones((1, 2, 2, 2))), padding="same")
    with pytest.raises(ConfigError):
        ops.conv2d(x, Tensor(np.ones((1, 2, 3, 3))), stride=0)


# ---------------------------------------------------------------------------
# bilinear resize


def test_resize_identity(rng):
    x = Tensor(rng.standard_normal((2, 3, 5, 7)))
    assert np.array_equal(ops.bilinear_resize(x, 5, 7).data, x.data)


@pytest.mark.parametrize("oh,ow", [(1, 1), (3, 9), (16, 4), (13, 13)])
def test_resize_constant_field(oh, ow):
    x = Tensor(np.full((1, 1, 6, 5), 5.0))
    assert np.all(ops.bilinear_resize(x, oh, ow).data == 5.0)


def test_resize_2x2_to_4x4():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    out = ops.bilinear_resize(Tensor(x), 4, 4).data
    ref = oracles.resize(x, 4, 4)
    assert np.max(np.abs(out - ref)) < 1e-12
    # half-pixel centres: row 0 is clamped, row 1 sits a quarter of the way
    assert np.allclose(out[0, 0, 0], [1.0, 1.25, 1.75, 2.0])
    assert np.allclose(out[0, 0, 1], [1.5, 1.75, 2.25, 2.5])


@pytest.mark.parametrize("shape,target", [((1, 2, 5, 7), (3, 11)), ((2, 1, 8, 8), (4, 2)), ((1, 1, 3, 4), (10, 10))])
def test_resize_matches_loop_oracle(rng, shape, target):
    x = rng.standard_normal(shape)
    out = ops.bilinear_resize(Tensor(x), *target).data
    assert np.max(np.abs(out - oracles.resize(x, *target))) < 1e-12


@given(arrays(np.float64, (1, 2, 4, 5), elements=st.floats(-1e3, 1e3)), st.integers(1, 12), st.integers(1, 12))
def test_resize_is_convex(x, oh, ow):
    out = ops.bilinear_resize(Tensor(x), oh, ow).data
    lo, hi = x.min(axis=(2, 3)), x.max(axis=(2, 3))
    assert np.all(out >= lo[:, :, None, None] - 1e-9)
    assert np.all(out <= hi[:, :, None, None] + 1e-9)


def test_resize_errors():
    x = Tensor(np.ones((1, 1, 4, 4)))
    with pytest.raises(ConfigError):
        ops.bilinear_resize(x, 0, 3)


# ---------------------------------------------------------------------------
# activations


def test_sigmoid_and_relu_values():
    assert ops.sigmoid(Tensor(np.zeros((1, 1, 1, 1)))).item() == 0.5
    r = ops.relu(Tensor(np.array([[-3.2, 3.2]])))
    assert r.data.tolist() == [[0.0, 3.2]]
    with pytest.raises(ConfigError):
        ops.activation(Tensor(np.ones(2)), "tanh")


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_sigmoid_strictly_inside_unit_interval(dtype):
    s = ops.sigmoid(Tensor(np.array([-1e4, -50.0, 0.0, 50.0, 1e4], dtype=dtype))).data
    assert np.all(s > 0) and np.all(s < 1)


def test_sigmoid_gradient_at_zero():
    x = param(np.zeros((2, 3)))
    with fresh_tape():
        backward(ops.sum_all(ops.sigmoid(x)))
    assert np.all(x.grad == 0.25)


# ---------------------------------------------------------------------------
# batch norm


def test_batchnorm_train_normalises():
    x = Tensor(np.random.default_rng(3).standard_normal((4, 3, 5, 5)) * 3 + 2)
    st_ = ops.BatchNormState(3, dtype=np.float64)
    out = ops.batchnorm2d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), st_, "train").data
    assert np.all(np.abs(out.mean(axis=(0, 2, 3))) < 1e-6)
    # var + eps in the denominator pulls the variance just below 1
    var = out.var(axis=(0, 2, 3))
    assert np.all(np.abs(var - 1) < 1e-5 / x.data.var(axis=(0, 2, 3)).min() + 1e-6)


def test_batchnorm_zero_variance_channel():
    x = Tensor(np.full((2, 1, 3, 3), 7.0))
    out = ops.batchnorm2d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), ops.BatchNormState(1, dtype=np.float64), "train")
    assert np.all(out.data == 0)


def test_batchnorm_matches_scalar_oracle(rng):
    x = rng.standard_normal((4, 3, 5, 5))
    g, b = rng.standard_normal(3), rng.standard_normal(3)
    out = ops.batchnorm2d(Tensor(x), Tensor(g), Tensor(b), ops.BatchNormState(3, dtype=np.float64), "train").data
    assert np.max(np.abs(out - oracles.batchnorm_train(x, g, b, 1e-5))) < 1e-10


def test_batchnorm_running_stats_and_eval(rng):
    s = ops.BatchNormState(2, dtype=np.float64)
    g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
    with pytest.raises(ConfigError):
        ops.batchnorm2d(Tensor(np.ones((1, 2, 2, 2))), g, b, s, "eval")
    x1 = rng.standard_normal((3, 2, 4, 4))
    x2 = rng.standard_normal((3, 2, 4, 4)) + 1
    ops.batchnorm2d(Tensor(x1), g, b, s, "train")
    assert np.allclose(s.running_mean, x1.mean(axis=(0, 2, 3)))
    assert np.allclose(s.running_var, x1.var(axis=(0, 2, 3), ddof=1))
    ops.batchnorm2d(Tensor(x2), g, b, s, "train")
    assert np.allclose(s.running_mean, 0.9 * x1.mean(axis=(0, 2, 3)) + 0.1 * x2.mean(axis=(0, 2, 3)))
    out = ops.batchnorm2d(Tensor(x2), g, b, s, "eval").data
    ref = (x2 - s.running_mean[None, :, None, None]) / np.sqrt(s.running_var[None, :, None, None] + 1e-5)
    assert np.max(np.abs(out - ref)) < 1e-12


# ---------------------------------------------------------------------------
# pooling


def test_pool_examples():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert ops.pool2d(x, "max", 2, 2).item() == 4.0
    c = Tensor(np.full((2, 3, 4, 5), 2.5))
    assert np.all(ops.pool2d(c, "global_avg").data == 2.5)
    assert ops.pool2d(c, "global_avg").shape == (2, 3, 1, 1)


@pytest.mark.parametrize("kind,k,stride", [("avg", 3, 1), ("max", 2, 2), ("max", 3, 1), ("avg", 2, 2)])
def test_pool_matches_loop_oracle(rng, kind, k, stride):
    x = rng.standard_normal((2, 3, 7, 6))
    out = ops.pool2d(Tensor(x), kind, k, stride).data
    assert np.max(np.abs(out - oracles.pool(x, kind, k, stride))) < 1e-12


def test_maxpool_tie_goes_to_first_index():
    x = param(np.ones((1, 1, 2, 2)))
    with fresh_tape():
        backward(ops.sum_all(ops.pool2d(x, "max", 2)))
    assert x.grad[0, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]


def test_pool_window_too_large():
    with pytest.raises(ConfigError):
        ops.pool2d(Tensor(np.ones((1, 1, 2, 3))), "max", 3)


# ---------------------------------------------------------------------------
# dense, combine


def test_dense_examples(rng):
    x = rng.standard_normal((3, 4))
    assert np.array_equal(ops.dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)
    b = rng.standard_normal(2)
    out = ops.dense(Tensor(x), Tensor(np.zeros((4, 2))), Tensor(b)).data
    assert np.all(out == b)
    with pytest.raises(ShapeError):
        ops.dense(Tensor(x), Tensor(np.zeros((5, 2))))


def test_dense_matches_loop_oracle(rng):
    x, w, b = rng.standard_normal((3, 7)), rng.standard_normal((7, 4)), rng.standard_normal(4)
    out = ops.dense(Tensor(x), Tensor(w), Tensor(b)).data
    assert np.max(np.abs(out - oracles.dense(x, w, b))) < 1e-12


def test_combine_identities(rng):
    f = Tensor(rng.standard_normal((2, 8, 4, 4)))
    assert np.array_equal(ops.combine(f, Tensor(np.ones(f.shape)), "mul").data, f.data)
    assert np.array_equal(ops.combine(f, Tensor(np.zeros(f.shape)), "add").data, f.data)


def test_combine_channel_broadcast_matches_loop(rng):
    a = rng.standard_normal((2, 1, 3, 4))
    b = rng.standard_normal((2, 8, 3, 4))
    out = ops.combine(Tensor(a), Tensor(b), "mul").data
    ref = np.zeros_like(b)
    for n in range(2):
        for c in range(8):
            for i in range(3):
                for j in range(4):
                    ref[n, c, i, j] = a[n, 0, i, j] * b[n, c, i, j]
    assert np.max(np.abs(out - ref)) < 1e-12


def test_concat_order_and_errors(rng):
    a, b = rng.standard_normal((1, 1, 2, 2)), rng.standard_normal((1, 3, 2, 2))
    out = ops.combine(Tensor(a), Tensor(b), "concat_channels").data
    assert np.array_equal(out[:, :1], a) and np.array_equal(out[:, 1:], b)
    with pytest.raises(ShapeError):
        ops.combine(Tensor(a), Tensor(rng.standard_normal((1, 3, 3, 2))), "concat_channels")
    with pytest.raises(ShapeError):
        ops.combine(Tensor(rng.standard_normal((1, 2, 2, 2))), Tensor(b), "add")
    with pytest.raises(ConfigError):
        ops.combine(Tensor(a), Tensor(a), "sub")


# ---------------------------------------------------------------------------
# losses


def test_loss_uniform_values():
    z = Tensor(np.zeros((2, 2)))
    assert abs(ops.loss(z, np.array([0, 1]), "softmax_ce").item() - math.log(2)) < 1e-15
    m = np.random.default_rng(0).integers(0, 2, (1, 1, 3, 3))
    assert abs(ops.loss(Tensor(np.zeros((1, 1, 3, 3))), m, "bce").item() - math.log(2)) < 1e-15


def test_losses_match_reference(rng):
    z = rng.standard_normal((6, 3)) * 3
    t = rng.integers(0, 3, 6)
    assert abs(ops.loss(Tensor(z), t, "softmax_ce").item() - oracles.softmax_ce(z, t)) < 1e-10
    zl = rng.standard_normal((2, 1, 4, 4)) * 4
    y = rng.integers(0, 2, zl.shape).astype(float)
    assert abs(ops.loss(Tensor(zl), y, "bce").item() - oracles.bce(zl, y)) < 1e-10


def test_loss_errors():
    with pytest.raises(ConfigError):
        ops.loss(Tensor(np.zeros((2, 2))), np.array([0, 2]), "softmax_ce")
    with pytest.raises(ShapeError):
        ops.loss(Tensor(np.zeros((1, 1, 2, 2))), np.zeros((1, 1, 2, 3)), "bce")


def test_losses_stay_finite_at_extreme_logits():
    z = Tensor(np.array([[1e4, -1e4]]))
    assert np.isfinite(ops.loss(z, np.array([1]), "softmax_ce").item())
    assert np.isfinite(ops.loss(Tensor(np.full((1, 1, 1, 2), 800.0)), np.zeros((1, 1, 1, 2)), "bce").item())


# ---------------------------------------------------------------------------
# gradients of every primitive, over ten seeds


def _chain(x, k, b):
    return ops.sum_all(ops.square(ops.sigmoid(ops.conv2d(x, k, b, 2, "same"))))


def _cases(r):
    """(name, closure factory) pairs; every factory returns (f, params)."""
    out = []

    def conv():
        x, k, b = param(r.standard_normal((2, 3, 6, 6))), param(r.standard_normal((4, 3, 3, 3))), param(r.standard_normal(4))
        return lambda: _chain(x, k, b), [x, k, b]

    def conv_valid_1x1():
        x, k = param(r.standard_normal((2, 3, 5, 5))), param(r.standard_normal((2, 3, 1, 1)))
        k3 = param(r.standard_normal((2, 2, 3, 3)))
        wt = Tensor(r.standard_normal((2, 2, 3, 3)))
        return lambda: ops.sum_all(ops.combine(ops.conv2d(ops.conv2d(x, k), k3, None, 1, "valid"), wt, "mul")), [x, k, k3]

    def resize():
        x = param(r.standard_normal((2, 2, 5, 3)))
        wt = Tensor(r.standard_normal((2, 2, 7, 8)))
        return lambda: ops.sum_all(ops.combine(ops.bilinear_resize(x, 7, 8), wt, "mul")), [x]

    def resize_down():
        x = param(r.standard_normal((1, 2, 8, 8)))
        wt = Tensor(r.standard_normal((1, 2, 3, 5)))
        return lambda: ops.sum_all(ops.combine(ops.bilinear_resize(x, 3, 5), wt, "mul")), [x]

    def relu_():
        x = param(r.standard_normal((2, 3, 4, 4)))
        wt = Tensor(r.standard_normal((2, 3, 4, 4)))
        return lambda: ops.sum_all(ops.combine(ops.relu(x), wt, "mul")), [x]

    def bn(mode):
        def make():
            x, g, b = param(r.standard_normal((3, 2, 4, 4))), param(r.standard_normal(2) + 1), param(r.standard_normal(2))
            state = ops.BatchNormState(2, dtype=np.float64)
            state.running_mean, state.running_var, state.num_batches = r.standard_normal(2), r.random(2) + 0.5, 1
            wt = Tensor(r.standard_normal((3, 2, 4, 4)))

            def f():
                saved = state.copy()
                try:
                    return ops.sum_all(ops.combine(ops.batchnorm2d(x, g, b, state, mode), wt, "mul"))
                finally:
                    state.running_mean, state.running_var, state.num_batches = saved.running_mean, saved.running_var, saved.num_batches
            return f, [x, g, b]
        return make

    def pool(kind, k, s):
        def make():
            x = param(r.standard_normal((2, 2, 6, 6)))
            wt = Tensor(r.standard_normal(ops.pool2d(Tensor(x.data), kind, k, s).shape))
            return lambda: ops.sum_all(ops.combine(ops.pool2d(x, kind, k, s), wt, "mul")), [x]
        return make

    def dense():
        x, w, b = param(r.standard_normal((3, 2, 2, 2))), param(r.standard_normal((8, 4))), param(r.standard_normal(4))
        return lambda: ops.sum_all(ops.square(ops.dense(x, w, b))), [x, w, b]

    def combine_broadcast():
        a, b = param(r.standard_normal((2, 1, 3, 3))), param(r.standard_normal((2, 4, 3, 3)))
        s = param(r.standard_normal((2, 4, 1, 1)))
        def f():
            m = ops.combine(a, b, "mul")
            return ops.sum_all(ops.square(ops.combine(ops.combine(m, s, "mul"), ops.combine(b, a, "add"), "add")))
        return f, [a, b, s]

    def concat():
        a, b = param(r.standard_normal((1, 1, 3, 3))), param(r.standard_normal((1, 2, 3, 3)))
        k = param(r.standard_normal((2, 3, 3, 3)))
        return lambda: ops.sum_all(ops.square(ops.conv2d(ops.combine(a, b, "concat_channels"), k))), [a, b, k]

    def ce():
        z = param(r.standard_normal((5, 3)))
        t = r.integers(0, 3, 5)
        return lambda: ops.loss(z, t, "softmax_ce"), [z]

    def bce():
        z = param(r.standard_normal((2, 1, 3, 3)) * 2)
        y = r.integers(0, 2, (2, 1, 3, 3))
        return lambda: ops.loss(z, y, "bce"), [z]

    def misc():
        x = param(r.standard_normal((2, 3, 2, 2)))
        return lambda: ops.mean_all(ops.square(ops.reshape(x, (2, 12)))), [x]

    out += [("conv2d", conv), ("conv2d_valid_1x1", conv_valid_1x1), ("resize_up", resize), ("resize_down", resize_down),
            ("relu", relu_), ("batchnorm_train", bn("train")), ("batchnorm_eval", bn("eval")),
            ("maxpool", pool("max", 2, 2)), ("maxpool_overlap", pool("max", 3, 1)), ("avgpool", pool("avg", 3, 2)),
            ("global_avg", pool("global_avg", 1, 1)), ("dense", dense), ("combine", combine_broadcast),
            ("concat", concat), ("softmax_ce", ce), ("bce", bce), ("reshape_mean_square", misc)]
    return out


CASE_NAMES = [name for name, _ in _cases(np.random.default_rng(0))]


@pytest.mark.parametrize("name", CASE_NAMES)
def test_primitive_gradients_over_seeds(name):
    worst = 0.0
    for seed in GRAD_SEEDS:
        make = dict(_cases(np.random.default_rng(seed)))[name]
        f, params = make()
        worst = max(worst, max(grad_check_params(f, params)))
    assert worst < 1e-4, "%s: max relative error %.3g" % (name, worst)


def test_grad_check_quadratic_is_exact(rng):
    x = Tensor(rng.standard_normal((3, 4)))
    assert grad_check(lambda t: ops.sum_all(ops.square(t)), x) < 1e-8
