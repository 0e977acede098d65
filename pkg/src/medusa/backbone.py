"""Small residual CNN classifier exposing its per-stage feature maps."""
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .ops import BatchNormState
from .tensor import ConfigError, Parameter, ShapeError


@dataclass
class BackboneConfig:
    stage_channels: tuple = (16, 32, 64)
    blocks_per_stage: int = 2
    input_shape: tuple = (1, 64, 64)
    num_classes: int = 2

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if len(self.stage_channels) < 1:
            raise ConfigError("backbone needs at least one stage")
        if any(c < 1 for c in self.stage_channels):
            raise ConfigError("stage channel counts must be positive")
        if self.blocks_per_stage < 1:
            raise ConfigError("blocks_per_stage must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if len(self.input_shape) != 3:
            raise ConfigError("input_shape must be (C, H, W)")

    @property
    def stage_count(self):
        return len(self.stage_channels)

    def stage_shapes(self):
        """(channels, height, width) of each stage's output."""
        _, h, w = self.input_shape
        shapes = []
        for j, c in enumerate(self.stage_channels):
            if j > 0:
                h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
            shapes.append((c, h, w))
        return shapes


@dataclass
class StageFeatures:
    features: list
    gated: list
    logits: object
    extras: list = field(default_factory=list)


def he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class ConvBN:
    """conv (no bias) followed by batch norm."""

    def __init__(self, name, cin, cout, k, stride, rng, dtype):
        self.stride = stride
        self.kernel = Parameter(he_normal(rng, (cout, cin, k, k), cin * k * k, dtype), name + ".conv.weight")
        self.gamma = Parameter(np.ones(cout, dtype), name + ".bn.gamma")
        self.beta = Parameter(np.zeros(cout, dtype), name + ".bn.beta")
        self.bn = BatchNormState(cout, dtype=dtype)
        self.bn_name = name + ".bn"

    def params(self):
        return [self.kernel, self.gamma, self.beta]

    def __call__(self, x, mode):
        y = ops.conv2d(x, self.kernel, None, stride=self.stride, padding="same")
        return ops.batchnorm2d(y, self.gamma, self.beta, self.bn, mode)


class ResidualBlock:
    def __init__(self, name, cin, cout, stride, rng, dtype):
        self.conv1 = ConvBN(name + ".c1", cin, cout, 3, stride, rng, dtype)
        self.conv2 = ConvBN(name + ".c2", cout, cout, 3, 1, rng, dtype)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = ConvBN(name + ".proj", cin, cout, 1, stride, rng, dtype)

    def layers(self):
        return [l for l in (self.conv1, self.conv2, self.shortcut) if l is not None]

    def __call__(self, x, mode):
        y = ops.relu(self.conv1(x, mode))
        y = self.conv2(y, mode)
        skip = x if self.shortcut is None else self.shortcut(x, mode)
        return ops.relu(ops.combine(y, skip, "add"))


class Backbone:
    """Stages of residual blocks; stage j > 1 halves the resolution on entry."""

    def __init__(self, config, seed=0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        cin = config.input_shape[0]
        self.stages = []
        for j, c in enumerate(config.stage_channels):
            blocks = []
            for b in range(config.blocks_per_stage):
                stride = 2 if (j > 0 and b == 0) else 1
                blocks.append(ResidualBlock("backbone.s%d.b%d" % (j + 1, b + 1), cin, c, stride, rng, self.dtype))
                cin = c
            self.stages.append(blocks)
        fan_in = config.stage_channels[-1]
        w = (rng.standard_normal((fan_in, config.num_classes)) / np.sqrt(fan_in)).astype(self.dtype)
        self.fc_weight = Parameter(w, "backbone.fc.weight")
        self.fc_bias = Parameter(np.zeros(config.num_classes, self.dtype), "backbone.fc.bias")

    def _layers(self):
        for blocks in self.stages:
            for block in blocks:
                yield from block.layers()

    def parameters(self):
        out = []
        for layer in self._layers():
            out.extend(layer.params())
        out.extend([self.fc_weight, self.fc_bias])
        return out

    def bn_states(self):
        return {layer.bn_name: layer.bn for layer in self._layers()}

    def run_stage(self, j, x, mode):
        for block in self.stages[j]:
            x = block(x, mode)
        return x

    def head(self, x):
        return ops.dense(ops.pool2d(x, "global_avg"), self.fc_weight, self.fc_bias)

    def check_input(self, x):
        expect = self.config.input_shape
        if x.ndim != 4 or tuple(x.shape[1:]) != expect:
            raise ShapeError("backbone expects N x %d x %d x %d input, got %s" % (expect + (x.shape,)))

    def forward_features(self, x, gates=None, mode="eval"):
        """Run every stage, passing each stage output through its gate.

        ``gates`` holds one callable (or ``None`` for identity) per stage.  A
        gate maps ``F_j`` to ``F_bar_j``, which feeds the next stage.
        """
        self.check_input(x)
        J = self.config.stage_count
        if gates is None:
            gates = [None] * J
        if len(gates) != J:
            raise ConfigError("got %d gates for %d stages" % (len(gates), J))
        features, gated = [], []
        h = x
        for j in range(J):
            f = self.run_stage(j, h, mode)
            h = f if gates[j] is None else gates[j](j, f)
            features.append(f)
            gated.append(h)
        return StageFeatures(features, gated, self.head(h))

    def forward(self, x, mode="eval"):
        return self.forward_features(x, None, mode).logits


def build_backbone(config, seed=0, dtype=np.float32):
    return Backbone(config, seed, dtype)
