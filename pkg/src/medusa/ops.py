"""Differentiable operations.

Each op computes its forward value with numpy (or a kernel from
``kernels``), then registers a backward rule on the active tape.  Backward
rules return one gradient per input, or ``None`` for inputs that do not
need one.
"""
import numpy as np
from scipy.special import expit, logsumexp

from . import kernels
from .tensor import ConfigError, ShapeError, Tensor, note_branch, record


def _need(*tensors):
    return [t is not None and t.requires_grad for t in tensors]


def _check_rank(t, rank, what):
    if t.ndim != rank:
        raise ShapeError("%s must have rank %d, got shape %s" % (what, rank, t.shape))


# ---------------------------------------------------------------------------
# convolution


def conv2d(x, kernel, bias=None, stride=1, padding="same"):
    """2-D cross-correlation of an N x C x H x W input with Cout x C x k x k kernels."""
    _check_rank(x, 4, "conv2d input")
    _check_rank(kernel, 4, "conv2d kernel")
    n, c, h, w = x.shape
    cout, cin, kh, kw = kernel.shape
    if cin != c:
        raise ShapeError("conv2d: input has %d channels, kernel expects %d" % (c, cin))
    if kh != kw:
        raise ConfigError("conv2d: only square kernels are supported, got %dx%d" % (kh, kw))
    if stride < 1:
        raise ConfigError("conv2d: stride must be >= 1")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError("conv2d: bias shape %s does not match %d filters" % (bias.shape, cout))
    k = kh
    if padding == "same":
        if k % 2 == 0:
            raise ConfigError("conv2d: 'same' padding needs an odd kernel, got k=%d" % k)
        pad = k // 2
    elif padding == "valid":
        pad = 0
    else:
        raise ConfigError("conv2d: unknown padding %r" % (padding,))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d: kernel %d larger than padded input %dx%d" % (k, h, w))

    xd = x.data
    xpad = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    hp, wp = xpad.shape[2], xpad.shape[3]
    if k == 1 and stride == 1:
        cols = xpad.transpose(0, 2, 3, 1).reshape(n * ho * wo, c)
    else:
        cols = kernels.im2col(np.ascontiguousarray(xpad), k, stride, ho, wo)
    w2 = kernel.data.reshape(cout, -1)
    out = cols @ w2.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    need_x, need_k, need_b = _need(x, kernel, bias)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gx = gk = gb = None
        if need_k:
            gk = (g2.T @ cols).reshape(kernel.shape)
        if need_b:
            gb = g2.sum(axis=0)
        if need_x:
            dcols = g2 @ w2
            if k == 1 and stride == 1:
                gpad = np.ascontiguousarray(dcols.reshape(n, ho, wo, c).transpose(0, 3, 1, 2))
            else:
                gpad = kernels.col2im(dcols, n, c, hp, wp, k, stride, ho, wo)
            gx = gpad[:, :, pad:pad + h, pad:pad + w] if pad else gpad
        return gx, gk, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return record("conv2d", inputs, out, back)


# ---------------------------------------------------------------------------
# resizing


def bilinear_resize(x, out_h, out_w):
    """Bilinear resampling of the two trailing axes, half-pixel centres, edges clamped."""
    _check_rank(x, 4, "bilinear_resize input")
    if out_h < 1 or out_w < 1:
        raise ConfigError("bilinear_resize: target extents must be >= 1, got %dx%d" % (out_h, out_w))
    h, w = x.shape[2], x.shape[3]
    i0, i1, wy = kernels.bilinear_coords(h, out_h)
    j0, j1, wx = kernels.bilinear_coords(w, out_w)
    wy = wy.astype(x.dtype)
    wx = wx.astype(x.dtype)
    out = kernels.resize_forward(np.ascontiguousarray(x.data), i0, i1, wy, j0, j1, wx)

    def back(g):
        return (kernels.resize_backward(np.ascontiguousarray(g), h, w, i0, i1, wy, j0, j1, wx),)

    return record("bilinear_resize", (x,), out, back)


# ---------------------------------------------------------------------------
# activations


def sigmoid(x):
    # clipped so the result stays strictly inside (0, 1) at any precision
    lo = np.finfo(x.dtype).tiny
    hi = np.nextafter(x.dtype.type(1), x.dtype.type(0))
    s = np.clip(expit(x.data), lo, hi)

    def back(g):
        return (g * s * (1 - s),)

    return record("sigmoid", (x,), s, back)


def relu(x):
    mask = x.data > 0
    note_branch(mask)
    out = np.where(mask, x.data, x.dtype.type(0))

    def back(g):
        return (g * mask,)

    return record("relu", (x,), out, back)


def activation(x, kind):
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "relu":
        return relu(x)
    raise ConfigError("unknown activation %r" % (kind,))


# ---------------------------------------------------------------------------
# batch normalisation


class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.num_batches = 0

    @property
    def initialized(self):
        return self.num_batches > 0

    def copy(self):
        other = BatchNormState(self.channels, self.momentum, self.eps, self.running_mean.dtype)
        other.running_mean = self.running_mean.copy()
        other.running_var = self.running_var.copy()
        other.num_batches = self.num_batches
        return other


def batchnorm2d(x, gamma, beta, state, mode="train"):
    """Per-channel normalisation of an N x C x H x W tensor.

    Train mode normalises with the batch statistics and folds them into
    ``state``; eval mode uses the running statistics only.
    """
    _check_rank(x, 4, "batchnorm2d input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batchnorm2d: gamma/beta must have shape (%d,)" % c)
    xd = x.data
    axes = (0, 2, 3)
    if mode == "train":
        m = xd.size // c
        mean = xd.mean(axis=axes)
        centered = xd - mean[None, :, None, None]
        var = (centered * centered).mean(axis=axes)
        unbiased = var * (m / (m - 1)) if m > 1 else var
        mom = state.momentum
        if state.num_batches == 0:
            state.running_mean = mean.astype(state.running_mean.dtype)
            state.running_var = unbiased.astype(state.running_var.dtype)
        else:
            state.running_mean = ((1 - mom) * state.running_mean + mom * mean).astype(state.running_mean.dtype)
            state.running_var = ((1 - mom) * state.running_var + mom * unbiased).astype(state.running_var.dtype)
        state.num_batches += 1
    elif mode == "eval":
        if not state.initialized:
            raise ConfigError("batchnorm2d: running statistics are uninitialized; run a train step first")
        m = None
        mean = state.running_mean.astype(xd.dtype)
        var = state.running_var.astype(xd.dtype)
        centered = xd - mean[None, :, None, None]
    else:
        raise ConfigError("batchnorm2d: unknown mode %r" % (mode,))

    invstd = (1.0 / np.sqrt(var + state.eps)).astype(xd.dtype)
    xhat = centered * invstd[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    need_x, need_g, need_b = _need(x, gamma, beta)

    def back(g):
        gx = gg = gb = None
        if need_g:
            gg = (g * xhat).sum(axis=axes)
        if need_b or need_x:
            gsum = g.sum(axis=axes)
            if need_b:
                gb = gsum
        if need_x:
            scale = (gamma.data * invstd)[None, :, None, None]
            if m is None:
                gx = g * scale
            else:
                gxhat_sum = (g * xhat).sum(axis=axes)
                gx = scale / m * (m * g - gsum[None, :, None, None] - xhat * gxhat_sum[None, :, None, None])
        return gx, gg, gb

    return record("batchnorm2d", (x, gamma, beta), out, back)


# ---------------------------------------------------------------------------
# pooling


def pool2d(x, kind, k=2, stride=None):
    """Max, average, or global-average pooling (no padding)."""
    _check_rank(x, 4, "pool2d input")
    n, c, h, w = x.shape
    if kind == "global_avg":
        out = x.data.mean(axis=(2, 3), keepdims=True)

        def back_gap(g):
            return (np.broadcast_to(g / (h * w), x.shape).copy(),)

        return record("global_avg_pool", (x,), out, back_gap)

    stride = k if stride is None else stride
    if k < 1 or stride < 1:
        raise ConfigError("pool2d: window and stride must be >= 1")
    if k > h or k > w:
        raise ConfigError("pool2d: window %d larger than input %dx%d" % (k, h, w))
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1

    if kind == "max":
        out, arg = kernels.maxpool_forward(np.ascontiguousarray(x.data), k, stride, ho, wo)
        note_branch(arg)

        def back_max(g):
            return (kernels.maxpool_backward(np.ascontiguousarray(g), arg, h, w),)

        return record("max_pool", (x,), out, back_max)

    if kind == "avg":
        xd = x.data
        out = np.zeros((n, c, ho, wo), dtype=xd.dtype)
        for di in range(k):
            for dj in range(k):
                out += xd[:, :, di:di + stride * (ho - 1) + 1:stride, dj:dj + stride * (wo - 1) + 1:stride]
        out /= k * k

        def back_avg(g):
            gx = np.zeros_like(xd)
            gs = g / (k * k)
            for di in range(k):
                for dj in range(k):
                    gx[:, :, di:di + stride * (ho - 1) + 1:stride, dj:dj + stride * (wo - 1) + 1:stride] += gs
            return (gx,)

        return record("avg_pool", (x,), out, back_avg)

    raise ConfigError("pool2d: unknown kind %r" % (kind,))


# ---------------------------------------------------------------------------
# dense / reshaping


def dense(x, weight, bias=None):
    """Affine map of the flattened input: ``flatten(x) @ weight + bias``."""
    n = x.shape[0]
    x2 = x.data.reshape(n, -1)
    if weight.ndim != 2 or x2.shape[1] != weight.shape[0]:
        raise ShapeError("dense: %d input features but weight has shape %s" % (x2.shape[1], weight.shape))
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError("dense: bias shape %s does not match %d outputs" % (bias.shape, weight.shape[1]))
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    need_x, need_w, need_b = _need(x, weight, bias)

    def back(g):
        gx = (g @ weight.data.T).reshape(x.shape) if need_x else None
        gw = x2.T @ g if need_w else None
        gb = g.sum(axis=0) if need_b else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("dense", inputs, out, back)


def reshape(x, shape):
    out = x.data.reshape(shape)

    def back(g):
        return (g.reshape(x.shape),)

    return record("reshape", (x,), out, back)


def sum_all(x):
    out = np.asarray(x.data.sum())

    def back(g):
        return (np.full(x.shape, g, dtype=x.dtype),)

    return record("sum", (x,), out, back)


def mean_all(x):
    out = np.asarray(x.data.mean())

    def back(g):
        return (np.full(x.shape, g / x.data.size, dtype=x.dtype),)

    return record("mean", (x,), out, back)


def square(x):
    out = x.data * x.data

    def back(g):
        return (2 * g * x.data,)

    return record("square", (x,), out, back)


# ---------------------------------------------------------------------------
# elementwise combination


def _broadcast_shape(a, b):
    """Allowed broadcasts: equal shapes, one side single-channel, or one side 1x1 spatially."""
    if a.shape == b.shape:
        return a.shape
    if a.ndim == b.ndim == 4 and a.shape[0] == b.shape[0]:
        for small, big in ((a.shape, b.shape), (b.shape, a.shape)):
            if small[1] == 1 and small[2:] == big[2:]:
                return big
            if small[2:] == (1, 1) and small[1] == big[1]:
                return big
    raise ShapeError("combine: incompatible shapes %s and %s" % (a.shape, b.shape))


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def combine(a, b, mode):
    """Elementwise product or sum, or channel concatenation (``a`` first)."""
    if mode == "concat_channels":
        _check_rank(a, 4, "concat input")
        _check_rank(b, 4, "concat input")
        if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
            raise ShapeError("concat: N, H, W must match, got %s and %s" % (a.shape, b.shape))
        ca = a.shape[1]
        out = np.concatenate([a.data, b.data], axis=1)

        def back_cat(g):
            return g[:, :ca], g[:, ca:]

        return record("concat", (a, b), out, back_cat)

    if mode not in ("mul", "add"):
        raise ConfigError("combine: unknown mode %r" % (mode,))
    _broadcast_shape(a, b)
    if mode == "mul":
        out = a.data * b.data

        def back_mul(g):
            need_a, need_b = _need(a, b)
            ga = _unbroadcast(g * b.data, a.shape) if need_a else None
            gb = _unbroadcast(g * a.data, b.shape) if need_b else None
            return ga, gb

        return record("mul", (a, b), out, back_mul)
    out = a.data + b.data

    def back_add(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", (a, b), out, back_add)


# ---------------------------------------------------------------------------
# losses


def loss(pred, target, kind):
    """Mean softmax cross-entropy (``target``: class indices) or logit-space BCE."""
    if kind == "softmax_ce":
        if pred.ndim != 2:
            raise ShapeError("softmax_ce expects N x K logits, got %s" % (pred.shape,))
        t = np.asarray(target.data if isinstance(target, Tensor) else target).astype(np.int64).reshape(-1)
        n, k = pred.shape
        if t.shape[0] != n:
            raise ShapeError("softmax_ce: %d targets for %d rows" % (t.shape[0], n))
        if np.any(t < 0) or np.any(t >= k):
            raise ConfigError("softmax_ce: target index out of range for %d classes" % k)
        z = pred.data
        lse = logsumexp(z, axis=1)
        out = np.asarray(np.mean(lse - z[np.arange(n), t]), dtype=z.dtype)

        def back_ce(g):
            p = np.exp(z - lse[:, None])
            p[np.arange(n), t] -= 1
            return (p * (g / n),)

        return record("softmax_ce", (pred,), out, back_ce)

    if kind == "bce":
        y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
        if y.shape != pred.shape:
            raise ShapeError("bce: target shape %s does not match logits %s" % (y.shape, pred.shape))
        z = pred.data
        per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
        out = np.asarray(per.mean(), dtype=z.dtype)

        def back_bce(g):
            return ((expit(z) - y) * (g / z.size),)

        return record("bce", (pred,), out, back_bce)

    raise ConfigError("unknown loss %r" % (kind,))
