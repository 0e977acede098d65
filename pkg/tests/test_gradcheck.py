import numpy as np
import pytest

from medusa import ops
from medusa.gradcheck import grad_check, grad_check_params
from medusa.tensor import GradientError, Parameter, Tensor, record


def broken_square(x):
    # backward rule off by a factor of 1.5
    return record("broken_square", (x,), x.data * x.data, lambda g: (3 * g * x.data,))


def test_checker_detects_corrupted_backward():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 3)) + 2)
    assert grad_check(lambda t: ops.sum_all(broken_square(t)), x) > 1e-2


def test_checker_detects_dropped_term():
    def leaky_relu_missing_slope(x):
        out = np.where(x.data > 0, x.data, 0.1 * x.data)
        return record("leaky", (x,), out, lambda g: (g * (x.data > 0),))

    x = Tensor(-np.ones((1, 1, 2, 2)))
    assert grad_check(lambda t: ops.sum_all(leaky_relu_missing_slope(t)), x) > 1e-2


def test_conv_sigmoid_chain():
    r = np.random.default_rng(5)
    x = Tensor(r.standard_normal((1, 2, 5, 5)))
    k = Tensor(r.standard_normal((3, 2, 3, 3)))
    assert grad_check(lambda t: ops.sum_all(ops.sigmoid(ops.conv2d(t, k))), x) < 1e-4


def test_non_scalar_function_rejected():
    x = Tensor(np.ones((2, 2)))
    with pytest.raises(GradientError):
        grad_check(lambda t: ops.square(t), x)


def test_kink_refinement_keeps_tolerance():
    # x sits 5e-5 from the ReLU kink: the default step straddles it
    x = Parameter(np.array([[5e-5, -5e-5, 1.0]]), "x")
    stats = {}
    errs = grad_check_params(lambda: ops.sum_all(ops.relu(x)), [x], stats=stats)
    assert errs[0] < 1e-4
    assert stats["refined"] >= 2


def test_state_restored_after_check():
    p = Parameter(np.ones(3), "p")
    p.frozen = True
    before = p.data.copy()
    grad_check_params(lambda: ops.sum_all(ops.square(p)), [p])
    assert p.frozen and p.grad is None
    assert np.array_equal(p.data, before)
