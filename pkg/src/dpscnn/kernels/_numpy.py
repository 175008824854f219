"""Pure-numpy reference kernels.

Every function here has a twin in ``_numba`` with the same signature and
semantics; the two are interchangeable and tested against each other.
"""

import numpy as np


def im2col(xp, k, s, ho, wo):
    """Unfold a padded NCHW batch into (C*k*k, N*ho*wo) patch columns.

    Row index is (c, i, j) and column index is (n, oy, ox), both row-major.
    """
    n, c = xp.shape[:2]
    cols = np.empty((c, k, k, n, ho, wo), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
    return cols.reshape(c * k * k, n * ho * wo)


def col2im(cols, n, c, hp, wp, k, s, ho, wo):
    """Adjoint of :func:`im2col`: scatter-add columns back into a padded batch."""
    cols = cols.reshape(c, k, k, n, ho, wo)
    out = np.zeros((c, n, hp, wp), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += cols[:, i, j]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def maxpool_forward(x, k, s):
    n, c, h, w = x.shape
    ho = (h - k) // s + 1
    wo = (w - k) // s + 1
    out = np.full((n, c, ho, wo), -np.inf)
    arg = np.zeros((n, c, ho, wo), dtype=np.int64)
    # strict ">" keeps the first (lowest row-major) offset on ties
    for i in range(k):
        for j in range(k):
            win = x[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
            better = win > out
            out = np.where(better, win, out)
            arg[better] = i * k + j
    return out, arg


def maxpool_backward(dout, arg, h, w, k, s):
    n, c, ho, wo = dout.shape
    dx = np.zeros((n, c, h, w), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            hit = np.where(arg == i * k + j, dout, 0.0)
            dx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += hit
    return dx


def crop_gather(x, origins, mask, lh, lw):
    """Copy an lh x lw window per (image, part); masked parts stay zero."""
    n, c = x.shape[:2]
    m = origins.shape[1]
    out = np.zeros((n, m, c, lh, lw), dtype=x.dtype)
    for b in range(n):
        for p in range(m):
            if mask[b, p]:
                r, q = origins[b, p]
                out[b, p] = x[b, :, r:r + lh, q:q + lw]
    return out


def crop_scatter(g, origins, mask, h, w):
    """Adjoint of :func:`crop_gather`; overlapping windows accumulate."""
    n, m, c, lh, lw = g.shape
    out = np.zeros((n, c, h, w), dtype=g.dtype)
    for b in range(n):
        for p in range(m):
            if mask[b, p]:
                r, q = origins[b, p]
                out[b, :, r:r + lh, q:q + lw] += g[b, p]
    return out


def smooth2d(maps, kernel):
    """Correlate each (H, W) slice of a (B, H, W) stack with ``kernel``, replicate-padded."""
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    b, h, w = maps.shape
    padded = np.pad(maps, ((0, 0), (ph, ph), (pw, pw)), mode="edge")
    out = np.zeros_like(maps)
    for i in range(kh):
        for j in range(kw):
            out += kernel[i, j] * padded[:, i:i + h, j:j + w]
    return out
