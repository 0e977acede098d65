"""Dense tensors with a reverse-mode gradient tape."""
import contextlib
import threading

import numpy as np


class MedusaError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(MedusaError, ValueError):
    """Operand extents are incompatible."""


class ConfigError(MedusaError, ValueError):
    """An operation or model was configured with invalid settings."""


class NumericalError(MedusaError, FloatingPointError):
    """An operation produced NaN or infinite values."""


class GradientError(MedusaError, RuntimeError):
    """Misuse of the gradient tape."""


class Tensor:
    """A dense numpy array that can take part in a gradient tape.

    Feature maps are laid out batch x channels x height x width; classifier
    activations are batch x features and losses are 0-d.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True) if dtype is not None else np.array(data, copy=True)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if arr.size == 0:
            raise ShapeError("tensor extents must all be >= 1, got %s" % (arr.shape,))
        self.data = arr
        self._requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        t.data = arr
        t._requires_grad = False
        t.grad = None
        t._node = None
        return t

    @property
    def requires_grad(self):
        return self._requires_grad

    @requires_grad.setter
    def requires_grad(self, value):
        self._requires_grad = bool(value)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return "Tensor(shape=%s, dtype=%s, requires_grad=%s)" % (self.shape, self.dtype, self.requires_grad)

    # operator sugar; the real rules live in ``ops``
    def __add__(self, other):
        from . import ops

        return ops.combine(self, _as_tensor(other, self), "add")

    def __mul__(self, other):
        from . import ops

        return ops.combine(self, _as_tensor(other, self), "mul")

    __radd__ = __add__
    __rmul__ = __mul__


def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.full(like.shape, x, dtype=like.dtype))


class Parameter(Tensor):
    """A named trainable tensor.

    A frozen parameter still takes part in the forward pass, but no gradient
    is accumulated for it and optimizers leave it untouched.
    """

    def __init__(self, data, name, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.frozen = False

    @property
    def requires_grad(self):
        return not self.frozen

    @requires_grad.setter
    def requires_grad(self, value):
        self.frozen = not value

    def __repr__(self):
        return "Parameter(%r, shape=%s, frozen=%s)" % (self.name, self.shape, self.frozen)


class _Node:
    # holds the output's id, not the output: a back-reference would form a
    # cycle that keeps large buffers alive until the cyclic collector runs
    __slots__ = ("index", "inputs", "output_id", "backward_fn", "name")

    def __init__(self, index, inputs, output_id, backward_fn, name):
        self.index = index
        self.inputs = inputs
        self.output_id = output_id
        self.backward_fn = backward_fn
        self.name = name


class Tape:
    """Ordered record of differentiable operations.

    ``backward`` replays the record in exact reverse order.  A tape can be
    replayed once; afterwards it refuses further use.
    """

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __len__(self):
        return len(self.nodes)

    def record(self, name, inputs, output, backward_fn):
        if self.consumed:
            raise GradientError("tape was already used for backward; start a new tape")
        node = _Node(len(self.nodes), tuple(inputs), id(output), backward_fn, name)
        self.nodes.append(node)
        output._node = (self, node)
        return node

    def backward(self, loss, trace=None):
        if self.consumed:
            raise GradientError("backward called twice on the same tape")
        if loss.data.size != 1:
            raise GradientError("backward needs a scalar loss, got shape %s" % (loss.shape,))
        self.consumed = True
        grads = {id(loss): np.ones_like(loss.data)}
        nodes, self.nodes = self.nodes, []
        while nodes:
            node = nodes.pop()
            g = grads.pop(node.output_id, None)
            if g is None:
                continue
            if trace is not None:
                trace.append(node.index)
            in_grads = node.backward_fn(g)
            inputs = node.inputs
            node.inputs = node.backward_fn = None
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t._node is not None and t._node[0] is self:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi
                else:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.enabled = True
        self.branches = None


_state = _State()


def current_tape():
    if _state.tape.consumed:
        _state.tape = Tape()
    return _state.tape


def grad_enabled():
    return _state.enabled


@contextlib.contextmanager
def no_grad():
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def fresh_tape():
    """Run the block against a new, empty tape."""
    prev = _state.tape
    _state.tape = Tape()
    try:
        yield _state.tape
    finally:
        _state.tape = prev


@contextlib.contextmanager
def branch_log():
    """Collect the branch pattern (ReLU masks, max-pool winners) of the ops run inside."""
    prev = _state.branches
    _state.branches = []
    try:
        yield _state.branches
    finally:
        _state.branches = prev


def note_branch(arr):
    if _state.branches is not None:
        _state.branches.append(arr.tobytes())


def record(name, inputs, out_array, backward_fn):
    """Wrap ``out_array`` as a tensor, recording it if any input needs a gradient."""
    if not np.all(np.isfinite(out_array)):
        raise NumericalError("%s produced non-finite values" % name)
    out = Tensor._wrap(out_array)
    if _state.enabled and any(t.requires_grad for t in inputs):
        out._requires_grad = True
        current_tape().record(name, inputs, out, backward_fn)
    return out


def backward(loss, trace=None):
    """Back-propagate from a scalar ``loss`` into every reachable leaf.

    Gradients accumulate into ``.grad`` of leaf tensors that require them;
    frozen parameters are skipped.  ``trace``, if given, receives the tape
    indices of the visited operations in visiting order.
    """
    if loss._node is None:
        raise GradientError("loss is detached from any tape")
    tape, _ = loss._node
    tape.backward(loss, trace=trace)
