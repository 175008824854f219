"""Dense tensors and the recording tape for reverse-mode differentiation."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """A float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"


class Parameter(Tensor):
    """A trainable tensor; ``lr_mult`` scales the base learning rate (0 freezes it)."""

    __slots__ = ("lr_mult", "velocity")

    def __init__(self, data, lr_mult: float = 1.0, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)
        if lr_mult < 0:
            raise ValueError("lr_mult must be nonnegative")
        self.lr_mult = float(lr_mult)
        self.grad = np.zeros_like(self.data)
        self.velocity = np.zeros_like(self.data)


class _Record:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; ops executed inside it are recorded and
    :meth:`backward` replays their rules in exact reverse order.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor, seed: Optional[np.ndarray] = None) -> None:
        if seed is None:
            if loss.size != 1:
                raise ValueError("backward() on a non-scalar tensor needs an explicit seed gradient")
            seed = np.ones_like(loss.data)
        loss.accumulate(np.asarray(seed, dtype=np.float64))
        for rec in reversed(self.records):
            g = rec.output.grad
            if g is None:
                continue
            grads = rec.backward(g)
            for inp, gi in zip(rec.inputs, grads):
                if gi is not None and inp.requires_grad:
                    inp.accumulate(gi)


def active_tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


def record(inputs: Sequence[Tensor], out_data: np.ndarray, backward: BackwardFn) -> Tensor:
    """Wrap ``out_data`` in a Tensor and log its backward rule on the active tape.

    ``backward`` maps the output gradient to one gradient (or None) per input.
    Nothing is logged when no tape is active or no input needs a gradient.
    """
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        tape.records.append(_Record(tuple(inputs), out, backward))
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
