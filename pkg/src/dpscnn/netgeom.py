"""Receptive-field arithmetic and candidate keypoint grids.

A stack of (kernel, stride, padding) layers maps every output unit to a
square input region. The centers of those regions, one per output unit,
form the candidate grid scored by the localization head.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kernel: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid layer {self}: need kernel >= 1, stride >= 1, padding >= 0")


@dataclass(frozen=True)
class RFSpec:
    size: int
    jump: int
    start: float


@dataclass(frozen=True)
class CandidateGrid:
    rows: int
    cols: int
    start: float
    jump: int

    @property
    def centers(self) -> np.ndarray:
        """(rows, cols, 2) array of (y, x) input-pixel coordinates."""
        ys = self.start + self.jump * np.arange(self.rows, dtype=np.float64)
        xs = self.start + self.jump * np.arange(self.cols, dtype=np.float64)
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        return np.stack([yy, xx], axis=-1)

    def to_pixels(self, rc) -> np.ndarray:
        rc = np.asarray(rc, dtype=np.float64)
        return self.start + self.jump * rc

    def hull(self) -> tuple[float, float, float, float]:
        """(y0, x0, y1, x1) bounds of the convex hull of all centers."""
        return (
            self.start,
            self.start,
            self.start + self.jump * (self.rows - 1),
            self.start + self.jump * (self.cols - 1),
        )


IDENTITY_RF = RFSpec(size=1, jump=1, start=0.0)


def compose_rf(stack: Iterable[LayerSpec], base: RFSpec = IDENTITY_RF) -> RFSpec:
    size, jump, start = base.size, base.jump, base.start
    for layer in stack:
        size += (layer.kernel - 1) * jump
        start += ((layer.kernel - 1) / 2.0 - layer.padding) * jump
        jump *= layer.stride
    return RFSpec(size=size, jump=jump, start=start)


def output_size(stack: Iterable[LayerSpec], input_size: tuple[int, int]) -> tuple[int, int]:
    h, w = input_size
    for layer in stack:
        h = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
        w = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
    return h, w


def candidate_grid(rf: RFSpec, output_dims: tuple[int, int]) -> CandidateGrid:
    """Grid of receptive-field centers for a stack whose output is ``output_dims``.

    Use :func:`stack_grid` to derive the output dims from a stack and an input size.
    """
    rows, cols = output_dims
    if rows < 1 or cols < 1:
        raise ValueError(f"stack yields no output positions (output dims {output_dims})")
    return CandidateGrid(rows=rows, cols=cols, start=rf.start, jump=rf.jump)


def stack_grid(stack: Sequence[LayerSpec], input_size: tuple[int, int]) -> tuple[RFSpec, CandidateGrid]:
    rf = compose_rf(stack)
    return rf, candidate_grid(rf, output_size(stack, input_size))


class LayerFileError(ValueError):
    pass


def parse_layers(text: str, source: str = "<string>") -> list[LayerSpec]:
    """Parse ``name kernel stride padding`` lines; ``#`` starts a comment."""
    layers = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise LayerFileError(f"{source}:{lineno}: expected 'name kernel stride padding', got {raw!r}")
        try:
            layers.append(LayerSpec(parts[0], int(parts[1]), int(parts[2]), int(parts[3])))
        except ValueError as exc:
            raise LayerFileError(f"{source}:{lineno}: {exc}") from None
    return layers


def load_layers(path) -> list[LayerSpec]:
    """Load a layer file from disk, or a shipped config by bare name (e.g. ``bn_to_4a``)."""
    p = Path(path)
    if p.exists():
        return parse_layers(p.read_text(), str(p))
    name = p.name if p.suffix == ".layers" else f"{p.name}.layers"
    shipped = resources.files("dpscnn.configs").joinpath(name)
    if not shipped.is_file():
        raise FileNotFoundError(f"no layer file {path!s} (and no shipped config named {name})")
    return parse_layers(shipped.read_text(), name)


def shipped_configs() -> list[str]:
    return sorted(
        f.name for f in resources.files("dpscnn.configs").iterdir() if f.name.endswith(".layers")
    )


def format_table(stack: Sequence[LayerSpec]) -> str:
    """Per-layer running receptive field, one row per layer."""
    nw = max([len("layer")] + [len(layer.name) for layer in stack]) + 2
    rows = [f"{'layer':<{nw}}{'k':>4}{'s':>4}{'p':>4}{'size':>7}{'jump':>6}{'start':>9}"]
    acc = IDENTITY_RF
    for layer in stack:
        acc = compose_rf([layer], acc)
        rows.append(
            f"{layer.name:<{nw}}{layer.kernel:>4}{layer.stride:>4}{layer.padding:>4}"
            f"{acc.size:>7}{acc.jump:>6}{acc.start:>9.1f}"
        )
    return "\n".join(rows)
