from __future__ import annotations

from typing import Iterable

from .tensor import Parameter


def sgd_step(params: Iterable[Parameter], base_lr: float, momentum: float = 0.0) -> None:
    """One momentum-SGD update, then zero the gradients.

    v <- momentum * v - lr * lr_mult * g;  w <- w + v
    """
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    for p in params:
        lr = base_lr * p.lr_mult
        p.velocity *= momentum
        p.velocity -= lr * p.grad
        p.data += p.velocity
        p.grad[...] = 0.0
