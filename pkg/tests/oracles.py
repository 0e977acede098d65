"""Scalar-loop reference implementations used as test oracles."""
import math

import numpy as np


def conv2d(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for a in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    s = 0.0 if b is None else b[o]
                    for ci in range(c):
                        for di in range(k):
                            for dj in range(k):
                                y = i * stride + di - pad
                                z = j * stride + dj - pad
                                if 0 <= y < h and 0 <= z < wd:
                                    s += x[a, ci, y, z] * w[o, ci, di, dj]
                    out[a, o, i, j] = s
    return out


def _sample_1d(size_in, size_out, i):
    src = (i + 0.5) * size_in / size_out - 0.5
    src = min(max(src, 0.0), size_in - 1)
    lo = int(math.floor(src))
    hi = min(lo + 1, size_in - 1)
    return lo, hi, src - lo


def resize(x, oh, ow):
    n, c, h, w = x.shape
    out = np.zeros((n, c, oh, ow))
    for a in range(n):
        for ch in range(c):
            for i in range(oh):
                y0, y1, fy = _sample_1d(h, oh, i)
                for j in range(ow):
                    x0, x1, fx = _sample_1d(w, ow, j)
                    v = (x[a, ch, y0, x0] * (1 - fy) * (1 - fx) + x[a, ch, y0, x1] * (1 - fy) * fx
                         + x[a, ch, y1, x0] * fy * (1 - fx) + x[a, ch, y1, x1] * fy * fx)
                    out[a, ch, i, j] = v
    return out


def pool(x, kind, k, stride):
    n, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for a in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    vals = [x[a, ch, i * stride + di, j * stride + dj] for di in range(k) for dj in range(k)]
                    out[a, ch, i, j] = max(vals) if kind == "max" else sum(vals) / len(vals)
    return out


def dense(x, w, b):
    n, d = x.shape
    k = w.shape[1]
    out = np.zeros((n, k))
    for i in range(n):
        for j in range(k):
            s = b[j]
            for t in range(d):
                s += x[i, t] * w[t, j]
            out[i, j] = s
    return out


def batchnorm_train(x, gamma, beta, eps):
    n, c, h, w = x.shape
    out = np.zeros_like(x)
    for ch in range(c):
        vals = [x[a, ch, i, j] for a in range(n) for i in range(h) for j in range(w)]
        mean = sum(vals) / len(vals)
        var = sum((v - mean) ** 2 for v in vals) / len(vals)
        for a in range(n):
            for i in range(h):
                for j in range(w):
                    out[a, ch, i, j] = gamma[ch] * (x[a, ch, i, j] - mean) / math.sqrt(var + eps) + beta[ch]
    return out


def softmax_ce(z, t):
    total = 0.0
    for row, k in zip(z, t):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[k]
    return total / len(t)


def bce(z, y):
    total = 0.0
    flat_z, flat_y = np.ravel(z), np.ravel(y)
    for a, b in zip(flat_z, flat_y):
        p = 1.0 / (1.0 + math.exp(-a))
        total += -(b * math.log(p) + (1 - b) * math.log(1 - p))
    return total / flat_z.size
