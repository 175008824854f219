"""Loop kernels compiled with numba; see ``_numpy`` for the reference semantics.

Outputs are allocated with numpy and filled by the compiled loops. numba's
own allocator maps fresh pages for every large array, and the resulting page
faults cost more than the loops themselves.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _im2col(xp, k, s, ho, wo, cols):
    n, c = xp.shape[0], xp.shape[1]
    for ch in range(c):
        for i in range(k):
            for j in range(k):
                dst = cols[(ch * k + i) * k + j]
                for b in range(n):
                    for oy in range(ho):
                        src = xp[b, ch, oy * s + i]
                        base = (b * ho + oy) * wo
                        for ox in range(wo):
                            dst[base + ox] = src[ox * s + j]


def im2col(xp, k, s, ho, wo):
    n, c = xp.shape[:2]
    cols = np.empty((c * k * k, n * ho * wo), dtype=xp.dtype)
    _im2col(xp, k, s, ho, wo, cols)
    return cols


@njit(cache=True)
def _col2im(cols, k, s, ho, wo, out):
    n, c = out.shape[0], out.shape[1]
    for ch in range(c):
        for i in range(k):
            for j in range(k):
                src = cols[(ch * k + i) * k + j]
                for b in range(n):
                    for oy in range(ho):
                        dst = out[b, ch, oy * s + i]
                        base = (b * ho + oy) * wo
                        for ox in range(wo):
                            dst[ox * s + j] += src[base + ox]


def col2im(cols, n, c, hp, wp, k, s, ho, wo):
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    _col2im(cols, k, s, ho, wo, out)
    return out


@njit(cache=True)
def _maxpool_forward(x, k, s, out, arg):
    n, c, ho, wo = out.shape
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    best = -np.inf
                    where = 0
                    for i in range(k):
                        for j in range(k):
                            v = x[b, ch, oy * s + i, ox * s + j]
                            if v > best:
                                best = v
                                where = i * k + j
                    out[b, ch, oy, ox] = best
                    arg[b, ch, oy, ox] = where


def maxpool_forward(x, k, s):
    n, c, h, w = x.shape
    ho = (h - k) // s + 1
    wo = (w - k) // s + 1
    out = np.empty((n, c, ho, wo), dtype=x.dtype)
    arg = np.empty((n, c, ho, wo), dtype=np.int64)
    _maxpool_forward(x, k, s, out, arg)
    return out, arg


@njit(cache=True)
def _maxpool_backward(dout, arg, k, s, dx):
    n, c, ho, wo = dout.shape
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    a = arg[b, ch, oy, ox]
                    dx[b, ch, oy * s + a // k, ox * s + a % k] += dout[b, ch, oy, ox]


def maxpool_backward(dout, arg, h, w, k, s):
    n, c = dout.shape[:2]
    dx = np.zeros((n, c, h, w), dtype=dout.dtype)
    _maxpool_backward(dout, arg, k, s, dx)
    return dx


@njit(cache=True)
def _crop_gather(x, origins, mask, out):
    n, m, c, lh, lw = out.shape
    for b in range(n):
        for p in range(m):
            if not mask[b, p]:
                continue
            r = origins[b, p, 0]
            q = origins[b, p, 1]
            for ch in range(c):
                for i in range(lh):
                    for j in range(lw):
                        out[b, p, ch, i, j] = x[b, ch, r + i, q + j]


def crop_gather(x, origins, mask, lh, lw):
    n, c = x.shape[:2]
    out = np.zeros((n, origins.shape[1], c, lh, lw), dtype=x.dtype)
    _crop_gather(x, origins, mask, out)
    return out


@njit(cache=True)
def _crop_scatter(g, origins, mask, out):
    n, m, c, lh, lw = g.shape
    for b in range(n):
        for p in range(m):
            if not mask[b, p]:
                continue
            r = origins[b, p, 0]
            q = origins[b, p, 1]
            for ch in range(c):
                for i in range(lh):
                    for j in range(lw):
                        out[b, ch, r + i, q + j] += g[b, p, ch, i, j]


def crop_scatter(g, origins, mask, h, w):
    n, _, c = g.shape[:3]
    out = np.zeros((n, c, h, w), dtype=g.dtype)
    _crop_scatter(g, origins, mask, out)
    return out


@njit(cache=True)
def _smooth2d(maps, kernel, out):
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    nb, h, w = maps.shape
    for b in range(nb):
        for y in range(h):
            for x in range(w):
                acc = 0.0
                for i in range(kh):
                    yy = min(max(y + i - ph, 0), h - 1)
                    for j in range(kw):
                        xx = min(max(x + j - pw, 0), w - 1)
                        acc += kernel[i, j] * maps[b, yy, xx]
                out[b, y, x] = acc


def smooth2d(maps, kernel):
    out = np.empty_like(maps)
    _smooth2d(maps, kernel, out)
    return out
