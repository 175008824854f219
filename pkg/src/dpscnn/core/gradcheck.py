"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .ops import weighted_sum
from .tensor import Tape, Tensor

FD_STEP = 1e-5


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    passed: bool
    analytic: list = field(repr=False, default_factory=list)
    numeric: list = field(repr=False, default_factory=list)
    message: str = ""


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max elementwise |a-b| / max(|a|, |b|, floor)."""
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def _scalarize(out: Tensor, rng: np.random.Generator, projection: Optional[np.ndarray]):
    if out.size == 1 and projection is None:
        return out, None
    if projection is None:
        projection = rng.uniform(-1.0, 1.0, size=out.shape)
    return weighted_sum(out, projection), projection


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor] | Tensor,
    tolerance: float = 1e-6,
    h: float = FD_STEP,
    seed: int = 0,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare analytic gradients of ``fn(*inputs)`` with central differences.

    Non-scalar outputs are reduced with a fixed random projection so the
    check covers every output element.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    rng = np.random.default_rng(seed)
    for t in inputs:
        t.requires_grad = True
        t.grad = None

    with Tape() as tape:
        out, proj = _scalarize(fn(*inputs), rng, None)
    if not np.isfinite(out.data).all():
        return GradCheckReport(np.inf, tolerance, False, message="non-finite forward value")
    tape.backward(out)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

    def value() -> float:
        o = fn(*inputs)
        if proj is not None:
            return float((o.data * proj).sum())
        return float(o.data.reshape(-1)[0])

    numeric = []
    for t in inputs:
        num = np.zeros(t.shape)
        flat = t.data.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = value()
            flat[i] = orig - h
            fm = value()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * h)
        numeric.append(num)

    if not all(np.isfinite(a).all() for a in analytic) or not all(np.isfinite(n).all() for n in numeric):
        return GradCheckReport(np.inf, tolerance, False, analytic, numeric, "non-finite gradient")
    err = max(relative_error(a, n, floor) for a, n in zip(analytic, numeric))
    return GradCheckReport(err, tolerance, err <= tolerance, analytic, numeric)
