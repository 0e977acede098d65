"""Hot inner loops behind the differentiable ops.

Every kernel exists twice: an explicit-loop version compiled with numba when
it is available, and a vectorised numpy version.  The module-level names
(``im2col``, ``col2im``, ...) point at whichever path ``_jit.HAS_NUMBA``
selected; both paths stay importable for benchmarking and cross-checks.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._jit import HAS_NUMBA, njit

# ---------------------------------------------------------------------------
# im2col / col2im
#
# cols layout: rows (n, ho, wo), columns (c, ki, kj); xpad is already padded.
# Tall-skinny products against this layout are markedly faster in BLAS.


@njit(cache=True)
def im2col_loops(xpad, k, stride, ho, wo):
    n_, c_ = xpad.shape[0], xpad.shape[1]
    cols = np.empty((n_ * ho * wo, c_ * k * k), dtype=xpad.dtype)
    for n in range(n_):
        for i in range(ho):
            for j in range(wo):
                row = (n * ho + i) * wo + j
                for c in range(c_):
                    for ki in range(k):
                        for kj in range(k):
                            cols[row, (c * k + ki) * k + kj] = xpad[n, c, i * stride + ki, j * stride + kj]
    return cols


@njit(cache=True)
def col2im_loops(cols, n_, c_, hp, wp, k, stride, ho, wo):
    out = np.zeros((n_, c_, hp, wp), dtype=cols.dtype)
    for n in range(n_):
        for i in range(ho):
            for j in range(wo):
                row = (n * ho + i) * wo + j
                for c in range(c_):
                    for ki in range(k):
                        for kj in range(k):
                            out[n, c, i * stride + ki, j * stride + kj] += cols[row, (c * k + ki) * k + kj]
    return out


def im2col_numpy(xpad, k, stride, ho, wo):
    n_, c_ = xpad.shape[:2]
    win = sliding_window_view(xpad, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n_ * ho * wo, c_ * k * k)


def col2im_numpy(cols, n_, c_, hp, wp, k, stride, ho, wo):
    out = np.zeros((n_, c_, hp, wp), dtype=cols.dtype)
    blocks = cols.reshape(n_, ho, wo, c_, k, k)
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki:ki + stride * (ho - 1) + 1:stride, kj:kj + stride * (wo - 1) + 1:stride] += (
                blocks[..., ki, kj].transpose(0, 3, 1, 2)
            )
    return out


# ---------------------------------------------------------------------------
# bilinear resize, half-pixel centres


def bilinear_coords(in_size, out_size):
    """Source indices and fractional weights for one axis.

    Returns ``(i0, i1, w)`` so that output ``o`` samples
    ``x[i0] + w * (x[i1] - x[i0])``.
    """
    scale = in_size / out_size
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, in_size - 1)
    w = src - i0
    return i0, i1, w


@njit(cache=True)
def resize_forward_loops(x, i0, i1, wy, j0, j1, wx):
    n_, c_ = x.shape[0], x.shape[1]
    oh, ow = i0.shape[0], j0.shape[0]
    out = np.empty((n_, c_, oh, ow), dtype=x.dtype)
    for n in range(n_):
        for c in range(c_):
            for p in range(oh):
                a, b, fy = i0[p], i1[p], wy[p]
                for q in range(ow):
                    l, r, fx = j0[q], j1[q], wx[q]
                    top = x[n, c, a, l] + fx * (x[n, c, a, r] - x[n, c, a, l])
                    bot = x[n, c, b, l] + fx * (x[n, c, b, r] - x[n, c, b, l])
                    out[n, c, p, q] = top + fy * (bot - top)
    return out


@njit(cache=True)
def resize_backward_loops(g, h, w, i0, i1, wy, j0, j1, wx):
    n_, c_ = g.shape[0], g.shape[1]
    oh, ow = i0.shape[0], j0.shape[0]
    out = np.zeros((n_, c_, h, w), dtype=g.dtype)
    for n in range(n_):
        for c in range(c_):
            for p in range(oh):
                a, b, fy = i0[p], i1[p], wy[p]
                for q in range(ow):
                    l, r, fx = j0[q], j1[q], wx[q]
                    v = g[n, c, p, q]
                    out[n, c, a, l] += (1.0 - fy) * (1.0 - fx) * v
                    out[n, c, a, r] += (1.0 - fy) * fx * v
                    out[n, c, b, l] += fy * (1.0 - fx) * v
                    out[n, c, b, r] += fy * fx * v
    return out


def resize_forward_numpy(x, i0, i1, wy, j0, j1, wx):
    wx = wx.astype(x.dtype)
    wy = wy.astype(x.dtype)[:, None]
    left, right = x[..., j0], x[..., j1]
    rows = left + wx * (right - left)
    top, bot = rows[..., i0, :], rows[..., i1, :]
    return top + wy * (bot - top)


def _interp_matrix(i0, i1, w, in_size, dtype):
    m = np.zeros((i0.shape[0], in_size), dtype=dtype)
    idx = np.arange(i0.shape[0])
    np.add.at(m, (idx, i0), 1.0 - w)
    np.add.at(m, (idx, i1), w)
    return m


def resize_backward_numpy(g, h, w, i0, i1, wy, j0, j1, wx):
    ry = _interp_matrix(i0, i1, wy, h, g.dtype)
    rx = _interp_matrix(j0, j1, wx, w, g.dtype)
    return np.ascontiguousarray(ry.T @ g @ rx)


# ---------------------------------------------------------------------------
# max pooling; argmax stored as a flat offset into the input plane,
# ties resolved to the first element in row-major window order.


@njit(cache=True)
def maxpool_forward_loops(x, k, stride, ho, wo):
    n_, c_, w = x.shape[0], x.shape[1], x.shape[3]
    out = np.empty((n_, c_, ho, wo), dtype=x.dtype)
    arg = np.empty((n_, c_, ho, wo), dtype=np.int64)
    for n in range(n_):
        for c in range(c_):
            for i in range(ho):
                for j in range(wo):
                    r0, c0 = i * stride, j * stride
                    best = x[n, c, r0, c0]
                    bi = r0 * w + c0
                    for di in range(k):
                        for dj in range(k):
                            v = x[n, c, r0 + di, c0 + dj]
                            if v > best:
                                best = v
                                bi = (r0 + di) * w + c0 + dj
                    out[n, c, i, j] = best
                    arg[n, c, i, j] = bi
    return out, arg


@njit(cache=True)
def maxpool_backward_loops(g, arg, h, w):
    n_, c_, ho, wo = g.shape
    out = np.zeros((n_, c_, h * w), dtype=g.dtype)
    for n in range(n_):
        for c in range(c_):
            for i in range(ho):
                for j in range(wo):
                    out[n, c, arg[n, c, i, j]] += g[n, c, i, j]
    return out.reshape((n_, c_, h, w))


def maxpool_forward_numpy(x, k, stride, ho, wo):
    w = x.shape[3]
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(win.shape[:4] + (k * k,))
    local = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    rows = np.arange(ho)[:, None] * stride + local // k
    cols = np.arange(wo)[None, :] * stride + local % k
    return np.ascontiguousarray(out), (rows * w + cols).astype(np.int64)


def maxpool_backward_numpy(g, arg, h, w):
    n_, c_ = g.shape[:2]
    out = np.zeros((n_, c_, h * w), dtype=g.dtype)
    nn, cc = np.meshgrid(np.arange(n_), np.arange(c_), indexing="ij")
    flat_arg = arg.reshape(n_, c_, -1)
    np.add.at(out, (nn[..., None], cc[..., None], flat_arg), g.reshape(n_, c_, -1))
    return out.reshape(n_, c_, h, w)


if HAS_NUMBA:
    im2col, col2im = im2col_loops, col2im_loops
    resize_forward, resize_backward = resize_forward_loops, resize_backward_loops
    maxpool_forward, maxpool_backward = maxpool_forward_loops, maxpool_backward_loops
else:
    im2col, col2im = im2col_numpy, col2im_numpy
    resize_forward, resize_backward = resize_forward_numpy, resize_backward_numpy
    maxpool_forward, maxpool_backward = maxpool_forward_numpy, maxpool_backward_numpy
