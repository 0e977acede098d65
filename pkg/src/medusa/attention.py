"""Global encoder-decoder attention and its scale-specific heads.

One encoder-decoder looks at the raw image and produces a single
full-resolution attention logit map ``A_G``.  Its sigmoid is resized to each
backbone stage, combined with that stage's features by a 3x3 convolution,
and squashed again into a gate ``A_bar_j`` in (0, 1).  The stage output is
then ``F_bar_j = A_bar_j * F_j + F_j``.
"""
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .backbone import ConvBN
from .tensor import ConfigError, Parameter, ShapeError


@dataclass
class GlobalConfig:
    depth: int = 3
    base_channels: int = 8

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("global module depth must be >= 1")
        if self.base_channels < 1:
            raise ConfigError("global module base_channels must be >= 1")


class GlobalAttentionModule:
    """U-Net style encoder-decoder producing a one-channel attention logit map."""

    def __init__(self, input_shape, depth=3, base_channels=8, seed=0, dtype=np.float32):
        c, h, w = input_shape
        if depth < 1:
            raise ConfigError("global module depth must be >= 1")
        if h % (2 ** depth) or w % (2 ** depth):
            raise ConfigError("input extents %dx%d not divisible by 2**%d" % (h, w, depth))
        self.input_shape = tuple(input_shape)
        self.depth = depth
        self.base_channels = base_channels
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        widths = [base_channels * 2 ** i for i in range(depth + 1)]
        self.encoder = []
        cin = c
        for i in range(depth):
            self.encoder.append(ConvBN("global.enc%d" % (i + 1), cin, widths[i], 3, 1, rng, self.dtype))
            cin = widths[i]
        self.bottleneck = ConvBN("global.mid", cin, widths[depth], 3, 1, rng, self.dtype)
        cin = widths[depth]
        self.up = []
        self.fuse = []
        for i in reversed(range(depth)):
            self.up.append(ConvBN("global.dec%d.up" % (i + 1), cin, widths[i], 3, 1, rng, self.dtype))
            self.fuse.append(ConvBN("global.dec%d.fuse" % (i + 1), 2 * widths[i], widths[i], 3, 1, rng, self.dtype))
            cin = widths[i]
        k = (rng.standard_normal((1, cin, 1, 1)) / np.sqrt(cin)).astype(self.dtype)
        self.out_weight = Parameter(k, "global.out.weight")
        self.out_bias = Parameter(np.zeros(1, self.dtype), "global.out.bias")

    def latent_shape(self):
        _, h, w = self.input_shape
        return (self.base_channels * 2 ** self.depth, h // 2 ** self.depth, w // 2 ** self.depth)

    def _layers(self):
        return self.encoder + [self.bottleneck] + self.up + self.fuse

    def parameters(self):
        out = []
        for layer in self._layers():
            out.extend(layer.params())
        out.extend([self.out_weight, self.out_bias])
        return out

    def bn_states(self):
        return {layer.bn_name: layer.bn for layer in self._layers()}

    def encode(self, x, mode="eval"):
        skips = []
        h = x
        for layer in self.encoder:
            h = ops.relu(layer(h, mode))
            skips.append(h)
            h = ops.pool2d(h, "max", 2, 2)
        z = ops.relu(self.bottleneck(h, mode))
        return z, skips

    def forward(self, x, mode="eval"):
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError("global module expects N x %d x %d x %d input, got %s" % (self.input_shape + (x.shape,)))
        h, skips = self.encode(x, mode)
        for up, fuse, skip in zip(self.up, self.fuse, reversed(skips)):
            h = ops.bilinear_resize(h, skip.shape[2], skip.shape[3])
            h = ops.relu(up(h, mode))
            h = ops.relu(fuse(ops.combine(skip, h, "concat_channels"), mode))
        return ops.conv2d(h, self.out_weight, self.out_bias, padding="same")


def build_global_module(input_shape, depth=3, base_channels=8, seed=0, dtype=np.float32):
    return GlobalAttentionModule(input_shape, depth, base_channels, seed, dtype)


def global_attention(module, x, mode="eval"):
    """Return ``(A_G, sigmoid(A_G))`` for a batch of images."""
    a_g = module.forward(x, mode)
    return a_g, ops.sigmoid(a_g)


class ScaleHead:
    """3x3 conv from [A'_j, F_j] (c_j + 1 channels) to c_j channels, then sigmoid."""

    def __init__(self, index, channels, rng, dtype=np.float32):
        self.index = index
        self.channels = channels
        fan_in = (channels + 1) * 9
        k = (rng.standard_normal((channels, channels + 1, 3, 3)) / np.sqrt(fan_in)).astype(dtype)
        self.weight = Parameter(k, "heads.%d.weight" % (index + 1))
        self.bias = Parameter(np.zeros(channels, dtype), "heads.%d.bias" % (index + 1))

    def parameters(self):
        return [self.weight, self.bias]


def scale_head_forward(head, sigma_a_g, f_j):
    """Return ``(A_bar_j, A'_j)`` for stage features ``f_j``."""
    if sigma_a_g.ndim != 4 or sigma_a_g.shape[1] != 1:
        raise ShapeError("sigma_a_g must be N x 1 x H x W, got %s" % (sigma_a_g.shape,))
    if f_j.shape[1] != head.channels:
        raise ShapeError("head %d expects %d channels, got %d" % (head.index + 1, head.channels, f_j.shape[1]))
    a_prime = ops.bilinear_resize(sigma_a_g, f_j.shape[2], f_j.shape[3])
    stacked = ops.combine(a_prime, f_j, "concat_channels")
    a_bar = ops.sigmoid(ops.conv2d(stacked, head.weight, head.bias, stride=1, padding="same"))
    return a_bar, a_prime


def apply_attention(f_j, a_bar_j):
    """``A_bar_j * F_j + F_j``."""
    if f_j.shape != a_bar_j.shape:
        raise ShapeError("attention map %s does not match features %s" % (a_bar_j.shape, f_j.shape))
    return ops.combine(ops.combine(a_bar_j, f_j, "mul"), f_j, "add")


@dataclass
class AttentionOutputs:
    a_g: object
    sigma_a_g: object
    a_prime: list = field(default_factory=list)
    a_bar: list = field(default_factory=list)
    f_bar: list = field(default_factory=list)


def medusa_gates(heads, sigma_a_g, record):
    """Per-stage gate callables that apply the heads and log into ``record``."""

    def make(head):
        def gate(j, f):
            a_bar, a_prime = scale_head_forward(head, sigma_a_g, f)
            f_bar = apply_attention(f, a_bar)
            record.a_prime.append(a_prime)
            record.a_bar.append(a_bar)
            record.f_bar.append(f_bar)
            return f_bar

        return gate

    return [make(h) for h in heads]
