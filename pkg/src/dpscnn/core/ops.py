"""Differentiable layer ops on NCHW tensors.

All ops take and return :class:`Tensor` and record themselves on the active
:class:`Tape`. Arithmetic is float64 throughout.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .. import kernels
from .tensor import Tensor, as_tensor, record


class ShapeError(ValueError):
    pass


def conv_output_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate ``x`` (N,C,H,W) with ``weight`` (O,C,k,k) plus ``bias`` (O)."""
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d expects NCHW input and OIKK weights, got input {x.shape} and weights {weight.shape}")
    n, c, h, w = x.shape
    o, ci, k, _ = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weights {weight.shape}")
    if bias.shape != (o,):
        raise ShapeError(f"conv2d bias {bias.shape} does not match weights {weight.shape}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if k > hp or k > wp:
        raise ShapeError(f"conv2d kernel does not fit padded input: input {x.shape} vs weights {weight.shape}")
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = kernels.im2col(np.ascontiguousarray(xp), k, stride, ho, wo)
    wmat = weight.data.reshape(o, -1)
    out = (wmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3) + bias.data[None, :, None, None]

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * ho * wo)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = kernels.col2im(wmat.T @ g2, n, c, hp, wp, k, stride, ho, wo)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw, gb

    return record((x, weight, bias), np.ascontiguousarray(out), backward)


def pool2d(x: Tensor, mode: str = "max", kernel: int = 2, stride: int = 2) -> Tensor:
    """Max or average pooling without padding.

    Max backward routes to the first maximal element in row-major window
    order; average backward spreads the gradient uniformly.
    """
    if x.ndim != 4:
        raise ShapeError(f"pool2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if kernel < 1 or stride < 1:
        raise ValueError("kernel and stride must be positive")
    if kernel > h or kernel > w:
        raise ShapeError(f"pool2d kernel {kernel} larger than input {x.shape}")
    ho, wo = (h - kernel) // stride + 1, (w - kernel) // stride + 1

    if mode == "max":
        out, arg = kernels.maxpool_forward(x.data, kernel, stride)

        def backward(g):
            return (kernels.maxpool_backward(np.ascontiguousarray(g), arg, h, w, kernel, stride),)

    elif mode == "avg":
        cols = kernels.im2col(x.data.reshape(n * c, 1, h, w), kernel, stride, ho, wo)
        out = cols.mean(axis=0).reshape(n, c, ho, wo)
        area = kernel * kernel

        def backward(g):
            gcols = np.repeat(g.reshape(1, n * c * ho * wo) / area, area, axis=0)
            return (kernels.col2im(gcols, n * c, 1, h, w, kernel, stride, ho, wo).reshape(n, c, h, w),)

    else:
        raise ValueError(f"pool2d mode must be 'max' or 'avg', got {mode!r}")
    return record((x,), out, backward)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` for x (N,D), weight (D,K), bias (K)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense shape mismatch: input {x.shape} vs weights {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense bias {bias.shape} does not match weights {weight.shape}")
    out = x.data @ weight.data + bias.data

    def backward(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return record((x, weight, bias), out, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return record((x,), x.data * mask, backward)


def log_softmax(z: np.ndarray, axis: int) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(z: np.ndarray, axis: int) -> np.ndarray:
    return np.exp(log_softmax(z, axis))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} do not align")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    logp = log_softmax(logits.data, axis=1)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return record((logits,), np.asarray(loss), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape

    def backward(g):
        return (g.reshape(src),)

    return record((x,), x.data.reshape(shape), backward)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(tuple(xs), np.concatenate([t.data for t in xs], axis=axis), backward)


def spatial_mean(x: Tensor) -> Tensor:
    """Global average pooling: (N,C,H,W) -> (N,C)."""
    n, c, h, w = x.shape

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return record((x,), x.data.mean(axis=(2, 3)), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return record((a, b), a.data + b.data, lambda g: (g, g))


def shift(x: Tensor, c: float) -> Tensor:
    """Add a constant."""
    return record((x,), x.data + c, lambda g: (g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    return record((a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def total(x: Tensor) -> Tensor:
    return record((x,), np.asarray(x.data.sum()), lambda g: (np.full(x.shape, float(g)),))


def weighted_sum(x: Tensor, weights) -> Tensor:
    """Scalar ``sum(x * weights)`` with a constant weight array."""
    x = as_tensor(x)
    wts = np.asarray(weights, dtype=np.float64)
    if wts.shape != x.shape:
        raise ShapeError(f"weights {wts.shape} do not match tensor {x.shape}")
    return record((x,), np.asarray((x.data * wts).sum()), lambda g: (wts * float(g),))
