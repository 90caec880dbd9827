"""Compiled loops behind the image primitives of :mod:`batcall.autodiff`.

Convolutions run on a zero-padded copy of each input plane flattened row by
row; with that layout every kernel tap is one contiguous shifted slice.  The
flattened output is processed in tiles of ``_TILE`` positions and four output
channels at a time so that one load of the input slice feeds four
accumulators.  Output positions that fall on the padding columns are computed
and discarded.  The input gradient of a convolution is itself a convolution
(flipped, transposed kernel) and reuses :func:`conv2d_forward`.
"""

import numpy as np
from numba import njit

_TILE = 512


@njit(cache=True)
def _pad_planes(x, n, xp, ph, pw, wp):
    c_, h, wd = x.shape[1], x.shape[2], x.shape[3]
    for c in range(c_):
        for i in range(h):
            s = (i + ph) * wp + pw
            xp[c, s : s + wd] = x[n, c, i]


@njit(cache=True, fastmath=True)
def conv2d_forward(x, w, b, ph, pw):
    """Cross-correlation; the number of output channels must be a multiple of 4."""
    n_, c_, h, wd = x.shape
    o_, _, kh, kw = w.shape
    wp = wd + 2 * pw
    ho = h + 2 * ph - kh + 1
    wo = wp - kw + 1
    span = ho * wp
    out = np.empty((n_, o_, ho, wo), x.dtype)
    xp = np.zeros((c_, (h + 2 * ph + 1) * wp), x.dtype)
    res = np.empty((o_, span), x.dtype)
    for n in range(n_):
        _pad_planes(x, n, xp, ph, pw, wp)
        for s0 in range(0, span, _TILE):
            m = min(_TILE, span - s0)
            for o in range(0, o_, 4):
                a0 = res[o, s0 : s0 + m]
                a1 = res[o + 1, s0 : s0 + m]
                a2 = res[o + 2, s0 : s0 + m]
                a3 = res[o + 3, s0 : s0 + m]
                a0[:] = b[o]
                a1[:] = b[o + 1]
                a2[:] = b[o + 2]
                a3[:] = b[o + 3]
                for c in range(c_):
                    for di in range(kh):
                        for dj in range(kw):
                            w0 = w[o, c, di, dj]
                            w1 = w[o + 1, c, di, dj]
                            w2 = w[o + 2, c, di, dj]
                            w3 = w[o + 3, c, di, dj]
                            off = s0 + di * wp + dj
                            src = xp[c, off : off + m]
                            for k in range(m):
                                v = src[k]
                                a0[k] += w0 * v
                                a1[k] += w1 * v
                                a2[k] += w2 * v
                                a3[k] += w3 * v
        for o in range(o_):
            for i in range(ho):
                out[n, o, i] = res[o, i * wp : i * wp + wo]
    return out


@njit(cache=True, fastmath=True)
def conv2d_grad_weight(x, g, kh, kw, ph, pw):
    """Kernel and bias gradients; ``g`` must have a multiple of 4 channels."""
    n_, c_, h, wd = x.shape
    o_, ho, wo = g.shape[1], g.shape[2], g.shape[3]
    wp = wd + 2 * pw
    span = ho * wp
    gw = np.zeros((o_, c_, kh, kw))
    gb = np.zeros(o_)
    xp = np.zeros((c_, (h + 2 * ph + 1) * wp), x.dtype)
    ge = np.zeros((o_, span), x.dtype)
    for n in range(n_):
        _pad_planes(x, n, xp, ph, pw, wp)
        for o in range(o_):
            for i in range(ho):
                ge[o, i * wp : i * wp + wo] = g[n, o, i]
            gb[o] += ge[o].sum()
        for s0 in range(0, span, _TILE):
            m = min(_TILE, span - s0)
            for o in range(0, o_, 4):
                e0 = ge[o, s0 : s0 + m]
                e1 = ge[o + 1, s0 : s0 + m]
                e2 = ge[o + 2, s0 : s0 + m]
                e3 = ge[o + 3, s0 : s0 + m]
                for c in range(c_):
                    for di in range(kh):
                        for dj in range(kw):
                            off = s0 + di * wp + dj
                            src = xp[c, off : off + m]
                            d0 = src[0] - src[0]
                            d1 = d0
                            d2 = d0
                            d3 = d0
                            for k in range(m):
                                v = src[k]
                                d0 += e0[k] * v
                                d1 += e1[k] * v
                                d2 += e2[k] * v
                                d3 += e3[k] * v
                            gw[o, c, di, dj] += d0
                            gw[o + 1, c, di, dj] += d1
                            gw[o + 2, c, di, dj] += d2
                            gw[o + 3, c, di, dj] += d3
    return gw, gb


@njit(cache=True, fastmath=True)
def channel_moments(y):
    """Per-channel mean and biased variance of ``(n, c, m)``, accumulated in float64."""
    n_, c_, m = y.shape
    mean = np.zeros(c_)
    for n in range(n_):
        for c in range(c_):
            s = 0.0
            plane = y[n, c]
            for k in range(m):
                s += plane[k]
            mean[c] += s
    mean /= n_ * m
    var = np.zeros(c_)
    for n in range(n_):
        for c in range(c_):
            mu = mean[c]
            s = 0.0
            plane = y[n, c]
            for k in range(m):
                d = plane[k] - mu
                s += d * d
            var[c] += s
    var /= n_ * m
    return mean, var


@njit(cache=True, fastmath=True)
def channel_affine(y, a, b):
    """``y * a[c] + b[c]`` over ``(n, c, m)``."""
    n_, c_, m = y.shape
    out = np.empty_like(y)
    for n in range(n_):
        for c in range(c_):
            ac = a[c]
            bc = b[c]
            src = y[n, c]
            dst = out[n, c]
            for k in range(m):
                dst[k] = src[k] * ac + bc
    return out


@njit(cache=True, fastmath=True)
def batchnorm_backward(g, y, mean, inv, gamma, need_x):
    """Training-mode batch-norm gradients on ``(n, c, m)`` arrays."""
    n_, c_, m = y.shape
    gsum = np.zeros(c_)
    gdot = np.zeros(c_)
    for n in range(n_):
        for c in range(c_):
            mu = mean[c]
            s = 0.0
            d = 0.0
            gp = g[n, c]
            yp = y[n, c]
            for k in range(m):
                s += gp[k]
                d += gp[k] * (yp[k] - mu)
            gsum[c] += s
            gdot[c] += d
    ggamma = (gdot * inv).astype(y.dtype)
    gbeta = gsum.astype(y.dtype)
    gx = np.empty(y.shape if need_x else (0, 0, 0), y.dtype)
    if need_x:
        total = n_ * m
        for c in range(c_):
            a = gamma[c] * inv[c]
            b0 = a * gsum[c] / total
            b1 = a * gdot[c] * inv[c] * inv[c] / total
            mu = mean[c]
            for n in range(n_):
                gp = g[n, c]
                yp = y[n, c]
                out = gx[n, c]
                for k in range(m):
                    out[k] = a * gp[k] - b0 - b1 * (yp[k] - mu)
    return gx, ggamma, gbeta


@njit(cache=True)
def maxpool2_forward(x, relu):
    """2x2/stride-2 max; with ``relu`` the result is clamped at zero.

    ``idx`` records the first maximising position (0..3, row-major) of
    every window.
    """
    n_, c_, h, w = x.shape
    h2 = h // 2
    w2 = w // 2
    out = np.empty((n_, c_, h2, w2), x.dtype)
    idx = np.empty((n_, c_, h2, w2), np.uint8)
    for n in range(n_):
        for c in range(c_):
            for i in range(h2):
                r0 = x[n, c, 2 * i]
                r1 = x[n, c, 2 * i + 1]
                for j in range(w2):
                    best = r0[2 * j]
                    k = 0
                    v = r0[2 * j + 1]
                    if v > best:
                        best = v
                        k = 1
                    v = r1[2 * j]
                    if v > best:
                        best = v
                        k = 2
                    v = r1[2 * j + 1]
                    if v > best:
                        best = v
                        k = 3
                    if relu and best < 0:
                        best = best - best
                    out[n, c, i, j] = best
                    idx[n, c, i, j] = k
    return out, idx


@njit(cache=True)
def maxpool2_backward(g, idx, out, shape, relu):
    gx = np.zeros(shape, g.dtype)
    n_, c_, h2, w2 = g.shape
    for n in range(n_):
        for c in range(c_):
            for i in range(h2):
                for j in range(w2):
                    if relu and out[n, c, i, j] <= 0:
                        continue
                    k = idx[n, c, i, j]
                    gx[n, c, 2 * i + k // 2, 2 * j + k % 2] = g[n, c, i, j]
    return gx
