import numpy as np
import pytest

from medusa import ops
from medusa.tensor import (GradientError, NumericalError, Parameter, ShapeError, Tensor, backward, fresh_tape,
                           no_grad, record)


def test_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with fresh_tape():
        backward(ops.sum_all(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_fan_out_accumulates():
    x = Tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
    with fresh_tape():
        backward(ops.sum_all(x + x))
    assert np.all(x.grad == 2)


def test_fan_out_through_intermediate():
    x = Tensor(np.full((1, 1, 2, 2), 3.0), requires_grad=True)
    with fresh_tape():
        y = ops.square(x)
        backward(ops.sum_all(ops.combine(y, y, "add")))
    assert np.all(x.grad == 4 * 3.0)


def test_backward_visits_in_reverse_order():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    trace = []
    with fresh_tape() as tape:
        y = ops.relu(ops.square(x))
        z = ops.sigmoid(y)
        loss = ops.sum_all(z)
        n = len(tape)
        backward(loss, trace)
    assert trace == list(range(n - 1, -1, -1))


def test_second_backward_is_an_error():
    x = Tensor(np.ones(3), requires_grad=True)
    with fresh_tape():
        loss = ops.sum_all(x)
        backward(loss)
        with pytest.raises(GradientError):
            backward(loss)


def test_detached_and_nonscalar_losses_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GradientError):
        backward(Tensor(np.ones(())))
    with fresh_tape():
        with pytest.raises(GradientError):
            backward(ops.square(x))
    with no_grad():
        y = ops.sum_all(x)
    with pytest.raises(GradientError):
        backward(y)


def test_frozen_parameter_gets_no_grad_but_passes_gradient_on():
    w = Parameter(np.full((2, 2), 3.0), "w")
    x = Tensor(np.ones((1, 2)), requires_grad=True)
    w.frozen = True
    with fresh_tape():
        backward(ops.sum_all(ops.dense(x, w)))
    assert w.grad is None
    assert np.array_equal(x.grad, [[6.0, 6.0]])


def test_non_finite_results_raise():
    with pytest.raises(NumericalError):
        record("bad", (), np.array([np.nan]), None)
    big = Tensor(np.array([1e200]))
    with pytest.raises(NumericalError), np.errstate(over="ignore"):
        ops.square(ops.square(big))


def test_empty_tensor_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((1, 0, 2, 2)))


def test_operations_are_deterministic():
    r = np.random.default_rng(0)
    x, k = Tensor(r.standard_normal((2, 3, 9, 9))), Tensor(r.standard_normal((4, 3, 3, 3)))
    a = ops.bilinear_resize(ops.conv2d(x, k, stride=2), 7, 5).data
    b = ops.bilinear_resize(ops.conv2d(x, k, stride=2), 7, 5).data
    assert a.tobytes() == b.tobytes()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with fresh_tape() as tape:
        with no_grad():
            ops.square(x)
        assert len(tape) == 0
