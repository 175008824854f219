"""Keypoint localization on a sparse grid of receptive-field centers.

Ground-truth keypoints become per-cell labels on the candidate grid; a 1x1
conv head scores M+1 channels (background first) per cell under a softmax
applied independently at every position, and inference picks the smoothed
per-part argmax when it clears a confidence threshold.
"""

from __future__ import annotations

import collections
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import kernels
from .core import Parameter, Tensor, log_softmax, record, softmax
from .netgeom import CandidateGrid, RFSpec, stack_grid
from .toynet import Conv, Trunk
from .training import fit

SENTINEL = (-1, -1)

#: counts of recoverable oddities seen while building labels (e.g. images without keypoints)
warning_counts: collections.Counter = collections.Counter()


@dataclass(eq=False)
class KeypointAnnotation:
    """M keypoints of one image as (y, x) pixel coordinates; ``visible`` marks present ones."""

    image_id: int
    points: np.ndarray
    visible: np.ndarray
    image_size: tuple = (0, 0)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.visible = np.asarray(self.visible, dtype=bool).reshape(-1)
        if self.visible.shape[0] != self.points.shape[0]:
            raise ValueError("points and visible flags disagree on the part count")
        self.points = np.where(self.visible[:, None], self.points, 0.0)
        self.image_size = tuple(int(v) for v in self.image_size)

    @property
    def n_parts(self) -> int:
        return self.points.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, KeypointAnnotation):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.image_size == other.image_size
            and np.array_equal(self.visible, other.visible)
            and np.array_equal(self.points, other.points)
        )

    def __repr__(self) -> str:
        pts = [tuple(p) if v else None for p, v in zip(self.points.tolist(), self.visible)]
        return f"KeypointAnnotation(id={self.image_id}, size={self.image_size}, points={pts})"


@dataclass
class PartLocations:
    """Grid (row, col) per part, (-1, -1) when missing, with the smoothed peak value."""

    coords: np.ndarray
    confidence: np.ndarray

    @property
    def present(self) -> np.ndarray:
        return self.coords[:, 0] >= 0

    def __len__(self) -> int:
        return self.coords.shape[0]


# ---------------------------------------------------------------- annotation files


class AnnotationParseError(ValueError):
    pass


def write_parts_file(path, annotations: Sequence[KeypointAnnotation]) -> None:
    """One line per (image, part): ``image_id part_id y x visible`` with 1-based part ids."""
    lines = []
    for ann in annotations:
        for p in range(ann.n_parts):
            y, x = (float(v) for v in ann.points[p])
            lines.append(f"{ann.image_id} {p + 1} {y!r} {x!r} {int(ann.visible[p])}")
    Path(path).write_text("\n".join(lines) + "\n")


def parse_parts(text: str, image_sizes: Optional[Dict[int, tuple]] = None, order: str = "yx",
                source: str = "<string>") -> List[KeypointAnnotation]:
    """Parse a parts file. ``order="xy"`` reads CUB ``part_locs.txt`` column order."""
    if order not in ("yx", "xy"):
        raise ValueError("order must be 'yx' or 'xy'")
    rows: Dict[int, Dict[int, tuple]] = {}
    max_part = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 5:
            raise AnnotationParseError(f"{source}:{lineno}: expected 5 fields 'image_id part_id y x visible', got {len(fields)}")
        try:
            img, part = int(fields[0]), int(fields[1])
            a, b = float(fields[2]), float(fields[3])
            vis = int(float(fields[4]))
        except ValueError:
            raise AnnotationParseError(f"{source}:{lineno}: non-numeric field in {raw!r}") from None
        if part < 1 or vis not in (0, 1):
            raise AnnotationParseError(f"{source}:{lineno}: part ids start at 1 and visible is 0/1")
        y, x = (a, b) if order == "yx" else (b, a)
        entry = rows.setdefault(img, {})
        if part in entry:
            raise AnnotationParseError(f"{source}:{lineno}: duplicate part {part} for image {img}")
        entry[part] = (y, x, bool(vis))
        max_part = max(max_part, part)
    out = []
    for img, parts in rows.items():
        pts = np.zeros((max_part, 2))
        vis = np.zeros(max_part, dtype=bool)
        for part, (y, x, v) in parts.items():
            pts[part - 1] = (y, x)
            vis[part - 1] = v
        size = (image_sizes or {}).get(img, (0, 0))
        out.append(KeypointAnnotation(img, pts, vis, size))
    return out


def read_parts_file(path, image_sizes=None, order: str = "yx") -> List[KeypointAnnotation]:
    path = Path(path)
    return parse_parts(path.read_text(), image_sizes, order, str(path))


# ---------------------------------------------------------------- labels and loss


def build_label_map(ann: KeypointAnnotation, grid: CandidateGrid, assignment_radius: Optional[float] = None) -> np.ndarray:
    """Label each grid cell with its nearest visible part (1..M) or 0 for background.

    Cells farther than ``assignment_radius`` (default: one grid step) from
    every visible keypoint are background; equidistant parts resolve to the
    lower part index.
    """
    radius = float(grid.jump if assignment_radius is None else assignment_radius)
    labels = np.zeros((grid.rows, grid.cols), dtype=np.int64)
    if not ann.visible.any():
        warning_counts["empty_label_map"] += 1
        return labels
    centers = grid.centers
    diff = centers[:, :, None, :] - ann.points[None, None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=-1))
    dist[:, :, ~ann.visible] = np.inf
    nearest = dist.argmin(axis=-1)
    best = np.take_along_axis(dist, nearest[..., None], axis=-1)[..., 0]
    keep = best <= radius
    labels[keep] = nearest[keep] + 1
    return labels


def location_softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax over the channel axis (-3) independently at each spatial position."""
    return softmax(logits, axis=-3)


def loc_loss(logits: Tensor, labels) -> Tensor:
    """Sum over grid positions of the per-position softmax loss.

    ``logits`` is (N, M+1, h, w) or (M+1, h, w); batches average the
    per-image sums.
    """
    labels = np.asarray(labels, dtype=np.int64)
    data = logits.data
    single = data.ndim == 3
    if single:
        data = data[None]
        labels = labels[None] if labels.ndim == 2 else labels
    n, c, h, w = data.shape
    if labels.shape != (n, h, w):
        raise ValueError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c - 1}]")
    logp = log_softmax(data, axis=1)
    picked = np.take_along_axis(logp, labels[:, None], axis=1)
    loss = -picked.sum() / n

    def backward(g):
        d = np.exp(logp)
        np.put_along_axis(d, labels[:, None], np.take_along_axis(d, labels[:, None], axis=1) - 1.0, axis=1)
        d *= float(g) / n
        return (d[0] if single else d,)

    return record((logits,), np.asarray(loss), backward)


# ---------------------------------------------------------------- inference


def gaussian_kernel(sigma: float = 1.0, support: int = 5) -> np.ndarray:
    if support < 1 or support % 2 == 0:
        raise ValueError(f"support must be a positive odd integer, got {support}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    r = np.arange(support) - support // 2
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def smooth(heatmaps: np.ndarray, sigma: float = 1.0, support: int = 5) -> np.ndarray:
    """Per-channel Gaussian smoothing with replicate padding; shape is preserved."""
    kernel = gaussian_kernel(sigma, support)
    maps = np.ascontiguousarray(heatmaps, dtype=np.float64)
    h, w = maps.shape[-2:]
    out = kernels.smooth2d(maps.reshape(-1, h, w), kernel)
    return out.reshape(maps.shape)


def default_mu(n_parts: int) -> float:
    return 2.0 / (n_parts + 1)


def infer_parts(smoothed: np.ndarray, mu: float) -> PartLocations:
    """Per part channel, the grid argmax if its value exceeds ``mu`` else (-1, -1).

    Channel 0 (background) is skipped; ties go to the first cell in
    row-major order.
    """
    if smoothed.ndim != 3 or smoothed.shape[0] < 2:
        raise ValueError(f"expected (M+1, h, w) maps with M >= 1, got {smoothed.shape}")
    m = smoothed.shape[0] - 1
    w = smoothed.shape[2]
    flat = smoothed[1:].reshape(m, -1)
    idx = flat.argmax(axis=1)
    conf = flat[np.arange(m), idx]
    coords = np.stack([idx // w, idx % w], axis=1).astype(np.int64)
    coords[~(conf > mu)] = SENTINEL
    return PartLocations(coords, conf.copy())


def grid_to_pixels(loc: PartLocations, rf) -> list:
    """Map grid cells to input pixels via the receptive-field centers; missing parts map to None."""
    start, jump = rf.start, rf.jump
    out = []
    for (r, c), ok in zip(loc.coords.tolist(), loc.present):
        out.append((start + r * jump, start + c * jump) if ok else None)
    return out


def pixels_to_grid(points: np.ndarray, visible: np.ndarray, grid: CandidateGrid) -> np.ndarray:
    """Nearest grid cell per visible point; invisible points get the sentinel."""
    rc = np.rint((np.asarray(points, dtype=np.float64) - grid.start) / grid.jump).astype(np.int64)
    rc[:, 0] = np.clip(rc[:, 0], 0, grid.rows - 1)
    rc[:, 1] = np.clip(rc[:, 1], 0, grid.cols - 1)
    rc[~np.asarray(visible, dtype=bool)] = SENTINEL
    return rc


# ---------------------------------------------------------------- network


class LocalizationNet:
    """Toy trunk plus a 1x1 conv scoring M+1 channels per grid cell."""

    def __init__(self, n_parts: int, channels=(16, 32, 32), image_size=(112, 112), seed: int = 0):
        if n_parts < 1:
            raise ValueError("the localization head needs at least one part")
        rng = np.random.default_rng(seed)
        self.n_parts = n_parts
        self.image_size = tuple(image_size)
        self.seed = seed
        self.trunk = Trunk(channels, rng, name="loc.trunk")
        self.head = Conv("loc.head", self.trunk.out_channels, n_parts + 1, 1, rng)
        # start from the background prior: almost every cell is background, and
        # uniform initial scores make the summed loss blow up the first steps
        _, grid = self.geometry()
        self.head.w.data *= 0.1
        self.head.b.data[0] = np.log(grid.rows * grid.cols / n_parts)
        self.frozen = False

    def config(self) -> dict:
        return {
            "kind": "localization",
            "n_parts": self.n_parts,
            "channels": list(self.trunk.channels),
            "image_size": list(self.image_size),
            "seed": self.seed,
        }

    def geometry(self) -> tuple[RFSpec, CandidateGrid]:
        return stack_grid(self.trunk.layer_specs(), self.image_size)

    def params(self) -> Dict[str, Parameter]:
        out = self.trunk.params()
        out.update(self.head.params())
        return out

    def __call__(self, images: Tensor) -> Tensor:
        return self.head(self.trunk(images))

    def freeze(self) -> None:
        for p in self.params().values():
            p.lr_mult = 0.0
            p.requires_grad = False
        self.frozen = True

    def probabilities(self, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
        out = []
        for s in range(0, len(images), batch_size):
            out.append(location_softmax(self(Tensor(images[s:s + batch_size])).data))
        return np.concatenate(out, axis=0)

    def predict(self, images: np.ndarray, mu: Optional[float] = None, sigma: float = 1.0,
                support: int = 5) -> List[PartLocations]:
        mu = default_mu(self.n_parts) if mu is None else mu
        probs = self.probabilities(images)
        return [infer_parts(smooth(p, sigma, support), mu) for p in probs]


def train_localizer(net: LocalizationNet, images: np.ndarray, labels: np.ndarray, epochs: int = 30,
                    lr: float = 2e-4, momentum: float = 0.9, batch_size: int = 16, seed: int = 0,
                    on_epoch=None) -> list[float]:
    """Fit the localization net on (N,3,H,W) images and (N,h,w) label maps; returns the loss curve."""
    if net.frozen:
        raise RuntimeError("localization net is frozen")

    def batch_loss(idx):
        return loc_loss(net(Tensor(images[idx])), labels[idx])

    return fit(net.params().values(), len(images), batch_loss, epochs, lr, momentum, batch_size, seed, on_epoch)
