from __future__ import annotations

import logging
from typing import Callable, Iterable, Optional

import numpy as np

from .core import Parameter, Tape, Tensor, sgd_step

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


def fit(
    params: Iterable[Parameter],
    n_samples: int,
    batch_loss: Callable[[np.ndarray], Tensor],
    epochs: int,
    lr: float,
    momentum: float,
    batch_size: int,
    seed: int,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> list[float]:
    """Shuffled minibatch SGD; returns the mean training loss of every epoch.

    ``batch_loss`` receives the sample indices of one batch and must build
    its loss inside the active tape.
    """
    params = list(params)
    rng = np.random.default_rng(seed)
    curve = []
    for epoch in range(epochs):
        order = rng.permutation(n_samples)
        total, count = 0.0, 0
        for start in range(0, n_samples, batch_size):
            idx = order[start:start + batch_size]
            with Tape() as tape:
                loss = batch_loss(idx)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericalError(f"non-finite loss {value} at epoch {epoch}, batch starting {start}")
            tape.backward(loss)
            sgd_step(params, lr, momentum)
            total += value * len(idx)
            count += len(idx)
        curve.append(total / max(count, 1))
        log.info("epoch %d loss %.6f", epoch, curve[-1])
        if on_epoch is not None:
            on_epoch(epoch, curve[-1])
    return curve
