"""Squeeze-excite channel attention, the lightweight comparison gate."""
import numpy as np

from . import ops
from .tensor import ConfigError, Parameter, ShapeError


class SEHead:
    def __init__(self, index, channels, reduction, rng, dtype=np.float32):
        if channels % reduction:
            raise ConfigError("SE head %d: %d channels not divisible by reduction %d" % (index + 1, channels, reduction))
        self.index = index
        self.channels = channels
        self.reduction = reduction
        hidden = channels // reduction
        self.hidden = hidden
        prefix = "se.%d." % (index + 1)
        self.w1 = Parameter((rng.standard_normal((channels, hidden)) * np.sqrt(2.0 / channels)).astype(dtype), prefix + "fc1.weight")
        self.b1 = Parameter(np.zeros(hidden, dtype), prefix + "fc1.bias")
        self.w2 = Parameter((rng.standard_normal((hidden, channels)) / np.sqrt(hidden)).astype(dtype), prefix + "fc2.weight")
        self.b2 = Parameter(np.zeros(channels, dtype), prefix + "fc2.bias")

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]


def se_gates(f_j, head):
    """Per-channel gates in (0, 1), shaped N x C x 1 x 1."""
    if f_j.ndim != 4 or f_j.shape[1] != head.channels:
        raise ShapeError("SE head %d expects %d channels, got shape %s" % (head.index + 1, head.channels, f_j.shape))
    squeezed = ops.pool2d(f_j, "global_avg")
    hidden = ops.relu(ops.dense(squeezed, head.w1, head.b1))
    gate = ops.sigmoid(ops.dense(hidden, head.w2, head.b2))
    return ops.reshape(gate, (f_j.shape[0], head.channels, 1, 1))


def se_forward(head, f_j):
    return ops.combine(f_j, se_gates(f_j, head), "mul")
