"""Procedural fine-grained dataset with part keypoints.

Each image holds one object: a body blob carrying M part tokens laid out on
a fixed skeleton. A token is a square ring in the part's own color around a
small black/white pattern; the class decides which pattern sits at which
part. Table entries of -1 draw the pattern at random per sample, so those
parts carry no class signal. Gray-ringed distractor tokens scattered over
the background repeat the same patterns without belonging to any part.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image

from .locnet import AnnotationParseError, KeypointAnnotation, read_parts_file, write_parts_file

PART_COLORS = np.array(
    [
        (220, 40, 40),
        (40, 190, 60),
        (50, 80, 230),
        (235, 210, 40),
        (200, 60, 210),
        (40, 200, 210),
        (240, 130, 30),
        (120, 60, 20),
        (150, 230, 150),
        (20, 20, 120),
    ],
    dtype=np.uint8,
)
DISTRACTOR_RING = np.array((128, 128, 128), dtype=np.uint8)
BODY_COLOR = np.array((170, 150, 120), dtype=np.float64)

DEFAULT_SKELETON = ((-30, 20), (-12, -18), (10, 22), (8, -36), (32, 0))


def pattern_masks(size: int) -> np.ndarray:
    """Binary (n_patterns, size, size) texture masks."""
    y, x = np.mgrid[0:size, 0:size]
    return np.stack(
        [
            (y // 2 % 2 == 0),  # horizontal stripes
            (x // 2 % 2 == 0),  # vertical stripes
            ((y // 2 + x // 2) % 2 == 0),  # checker
            ((y + x) // 2 % 3 == 0),  # diagonal
            ((y - size // 2) ** 2 + (x - size // 2) ** 2 <= (size // 3) ** 2),  # dot
        ]
    ).astype(bool)


def binary_code_table(n_classes: int, n_parts: int, n_coded: Optional[int] = None) -> list:
    """Class k carries bit b of k (pattern 0 or 1) at part b; remaining parts are random (-1)."""
    bits = max(1, int(np.ceil(np.log2(max(n_classes, 2)))))
    n_coded = bits if n_coded is None else n_coded
    if n_coded > n_parts:
        raise ValueError(f"{n_classes} classes need {n_coded} coded parts but only {n_parts} exist")
    table = []
    for k in range(n_classes):
        row = [(k >> b) & 1 for b in range(n_coded)] + [-1] * (n_parts - n_coded)
        table.append(row)
    return table


def balanced_code_table(n_classes: int, n_parts: int, n_patterns: int, min_distance: int = 3) -> list:
    """Greedy lexicographic code whose words all share one pattern histogram.

    Equal histograms make pattern counts useless as a class cue, and a
    minimum Hamming distance of 3 keeps the class decodable with up to two
    occluded parts.
    """
    base = sorted(i % n_patterns for i in range(n_parts))
    chosen = []
    for word in itertools.product(range(n_patterns), repeat=n_parts):
        if sorted(word) != base:
            continue
        if all(sum(a != b for a, b in zip(word, c)) >= min_distance for c in chosen):
            chosen.append(word)
            if len(chosen) == n_classes:
                return [list(w) for w in chosen]
    raise ValueError(
        f"no {n_classes}-word code of length {n_parts} over {n_patterns} patterns with distance {min_distance}"
    )


def single_part_pairs(class_tokens) -> list:
    """(a, b, part) for every class pair whose token rows differ at exactly one part."""
    out = []
    for a in range(len(class_tokens)):
        for b in range(a + 1, len(class_tokens)):
            diff = [p for p, (x, y) in enumerate(zip(class_tokens[a], class_tokens[b])) if x != y]
            if len(diff) == 1:
                out.append((a, b, diff[0]))
    return out


class ConfigError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass
class SynthConfig:
    """Generator settings; ``class_tokens`` defaults to :func:`balanced_code_table`."""

    image_size: tuple = (112, 112)
    n_parts: int = 5
    n_classes: int = 8
    skeleton: tuple = DEFAULT_SKELETON
    class_tokens: Optional[list] = None
    n_patterns: int = 3
    token_size: int = 11
    ring_width: int = 2
    jitter: int = 4
    max_translation: int = 8
    occlusion: float = 0.1
    n_distractors: int = 2
    noise: int = 12
    train_per_class: int = 40
    test_per_class: int = 20
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.skeleton = tuple(tuple(int(v) for v in a) for a in self.skeleton)
        if self.class_tokens is None:
            self.class_tokens = balanced_code_table(self.n_classes, self.n_parts, self.n_patterns)
        self.class_tokens = [[int(v) for v in row] for row in self.class_tokens]

    def validate(self) -> "SynthConfig":
        h, w = self.image_size
        if len(self.skeleton) != self.n_parts:
            raise ConfigError(f"skeleton has {len(self.skeleton)} anchors for {self.n_parts} parts")
        if self.n_parts > len(PART_COLORS):
            raise ConfigError(f"at most {len(PART_COLORS)} parts are supported")
        if self.token_size % 2 == 0 or self.token_size <= 2 * self.ring_width:
            raise ConfigError("token_size must be odd and larger than twice the ring width")
        if not 1 <= self.n_patterns <= len(pattern_masks(3)):
            raise ConfigError(f"n_patterns must lie in [1, {len(pattern_masks(3))}]")
        if len(self.class_tokens) != self.n_classes or any(len(r) != self.n_parts for r in self.class_tokens):
            raise ConfigError("class_tokens must be an n_classes x n_parts table")
        if any(not -1 <= v < self.n_patterns for row in self.class_tokens for v in row):
            raise ConfigError("class_tokens entries must be -1 (random) or a pattern index")
        for a in range(self.n_classes):
            for b in range(a + 1, self.n_classes):
                if not any(x != y and x >= 0 and y >= 0 for x, y in zip(self.class_tokens[a], self.class_tokens[b])):
                    raise ConfigError(f"classes {a} and {b} do not differ in any fixed part token")
        if not 0.0 <= self.occlusion < 1.0:
            raise ConfigError("occlusion must lie in [0, 1)")
        anchors = np.array(self.skeleton, dtype=float)
        if self.n_parts > 1:
            d = np.sqrt(((anchors[:, None] - anchors[None]) ** 2).sum(-1))
            d[np.diag_indices(self.n_parts)] = np.inf
            if not self.jitter < d.min() / 2:
                raise ConfigError(f"jitter {self.jitter} must stay below half the closest part spacing {d.min():.1f}")
        reach = self.max_translation + self.jitter + self.token_size // 2
        cy, cx = h // 2, w // 2
        for dy, dx in self.skeleton:
            if not (reach <= cy + dy < h - reach and reach <= cx + dx < w - reach):
                raise ConfigError(f"part anchor {(dy, dx)} cannot fit inside a {h}x{w} image")
        return self

    @classmethod
    def one_part_difference(cls, **overrides) -> "SynthConfig":
        """Binary-coded variant: classes that differ do so one part at a time.

        Class k shows bit b of k at part b for the first three parts, so
        every pair at Hamming distance 1 is separated by a single known part.
        Occlusion is off so each of those parts is always seen.
        """
        base = dict(n_patterns=2, occlusion=0.0)
        base.update(overrides)
        n_classes = base.get("n_classes", cls.n_classes)
        n_parts = base.get("n_parts", cls.n_parts)
        base.setdefault("class_tokens", binary_code_table(n_classes, n_parts))
        return cls(**base)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**d)


@dataclass(eq=False)
class Sample:
    image_id: int
    image: np.ndarray
    label: int
    annotation: KeypointAnnotation

    def __eq__(self, other) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.label == other.label
            and self.annotation == other.annotation
            and np.array_equal(self.image, other.image)
        )


@dataclass(eq=False)
class Dataset:
    config: SynthConfig
    train: List[Sample]
    test: List[Sample]
    class_names: List[str] = field(default_factory=list)

    @property
    def config_hash(self) -> str:
        return self.config.config_hash()

    def split(self, name: str) -> List[Sample]:
        if name not in ("train", "test"):
            raise ValueError(f"unknown split {name!r}")
        return self.train if name == "train" else self.test

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.config.to_json() == other.config.to_json()
            and self.class_names == other.class_names
            and self.train == other.train
            and self.test == other.test
        )


def images_nchw(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([s.image.transpose(2, 0, 1) for s in samples]).astype(np.float64)


def labels_of(samples: Sequence[Sample]) -> np.ndarray:
    return np.array([s.label for s in samples], dtype=np.int64)


# ---------------------------------------------------------------- rendering


def _draw_token(img: np.ndarray, cy: int, cx: int, ring, pattern: np.ndarray, ring_width: int) -> None:
    size = pattern.shape[0] + 2 * ring_width
    r = size // 2
    img[cy - r:cy + r + 1, cx - r:cx + r + 1] = ring
    inner = np.where(pattern[..., None], 235, 20).astype(np.uint8)
    img[cy - r + ring_width:cy + r + 1 - ring_width, cx - r + ring_width:cx + r + 1 - ring_width] = inner


def render_sample(config: SynthConfig, label: int, rng: np.random.Generator):
    """Render one image; returns (uint8 HxWx3 image, (M,2) keypoints, (M,) visibility).

    The random draws do not depend on ``label``: two classes rendered with
    the same generator state differ only inside the tokens whose patterns
    differ.
    """
    h, w = config.image_size
    m = config.n_parts
    inner = config.token_size - 2 * config.ring_width
    masks = pattern_masks(inner)[: config.n_patterns]
    r = config.token_size // 2

    noise = rng.integers(-config.noise, config.noise + 1, size=(h, w, 3))
    shift = rng.integers(-config.max_translation, config.max_translation + 1, size=2)
    jitter = rng.integers(-config.jitter, config.jitter + 1, size=(m, 2))
    occluded = rng.random(m) < config.occlusion
    random_patterns = rng.integers(0, config.n_patterns, size=m)
    body_tint = rng.uniform(-15, 15, size=3)
    distractor_patterns = rng.integers(0, config.n_patterns, size=config.n_distractors)
    distractor_pos = rng.integers(r, [h - r, w - r], size=(config.n_distractors * 20, 2))

    center = np.array([h // 2, w // 2]) + shift
    points = center[None, :] + np.array(config.skeleton) + jitter

    img = np.full((h, w, 3), 120.0) + noise
    yy, xx = np.mgrid[0:h, 0:w]
    span = np.abs(np.array(config.skeleton)).max(axis=0) + 4
    body = ((yy - center[0]) / span[0]) ** 2 + ((xx - center[1]) / span[1]) ** 2 <= 1.0
    img[body] = BODY_COLOR + body_tint + noise[body] * 0.5
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    # distractors avoid every part token (visible or not) so part windows stay clean
    placed = 0
    clearance = config.token_size + 2
    for pos in distractor_pos:
        if placed == config.n_distractors:
            break
        if np.all(np.abs(points - pos).max(axis=1) > clearance) and not body[pos[0], pos[1]]:
            _draw_token(img, pos[0], pos[1], DISTRACTOR_RING, masks[distractor_patterns[placed]], config.ring_width)
            placed += 1

    tokens = config.class_tokens[label]
    for p in range(m):
        if occluded[p]:
            continue
        pat = random_patterns[p] if tokens[p] < 0 else tokens[p]
        _draw_token(img, points[p, 0], points[p, 1], PART_COLORS[p], masks[pat], config.ring_width)
    return img, points.astype(np.float64), ~occluded


def generate(config: SynthConfig) -> Dataset:
    """Deterministic train/test dataset; sample i draws from its own RNG stream (seed, i)."""
    config.validate()
    splits = {"train": [], "test": []}
    image_id = 0
    for split, per_class in (("train", config.train_per_class), ("test", config.test_per_class)):
        for k in range(config.n_classes):
            for _ in range(per_class):
                rng = np.random.default_rng([config.seed, image_id])
                img, pts, vis = render_sample(config, k, rng)
                ann = KeypointAnnotation(image_id, pts, vis, config.image_size)
                splits[split].append(Sample(image_id, img.astype(np.float64) / 255.0, k, ann))
                image_id += 1
    names = [f"class_{k:02d}" for k in range(config.n_classes)]
    return Dataset(config, splits["train"], splits["test"], names)


# ---------------------------------------------------------------- storage


def save(dataset: Dataset, directory) -> None:
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    samples = dataset.train + dataset.test
    for s in samples:
        u8 = np.rint(s.image * 255.0).astype(np.uint8)
        Image.fromarray(u8).save(root / "images" / f"{s.image_id}.png", optimize=False)
    (root / "labels.txt").write_text("".join(f"{s.image_id} {s.label}\n" for s in samples))
    (root / "split.txt").write_text(
        "".join(f"{s.image_id} train\n" for s in dataset.train) + "".join(f"{s.image_id} test\n" for s in dataset.test)
    )
    write_parts_file(root / "parts.txt", [s.annotation for s in samples])
    (root / "classes.txt").write_text("".join(f"{k} {n}\n" for k, n in enumerate(dataset.class_names)))
    cfg = json.loads(dataset.config.to_json())
    cfg["config_hash"] = dataset.config_hash
    (root / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _read_pairs(path: Path, kinds) -> list:
    out = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        if not raw.strip():
            continue
        fields = raw.split()
        if len(fields) != len(kinds):
            raise DatasetFormatError(f"{path}:{lineno}: expected {len(kinds)} fields, got {len(fields)}")
        try:
            out.append(tuple(kind(f) for kind, f in zip(kinds, fields)))
        except ValueError:
            raise DatasetFormatError(f"{path}:{lineno}: malformed line {raw!r}") from None
    return out


def load(directory) -> Dataset:
    root = Path(directory)
    for name in ("config.json", "labels.txt", "parts.txt", "classes.txt", "split.txt"):
        if not (root / name).is_file():
            raise DatasetFormatError(f"{root}: missing {name}")
    try:
        cfg = json.loads((root / "config.json").read_text())
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{root / 'config.json'}: {exc}") from None
    stored_hash = cfg.pop("config_hash", None)
    config = SynthConfig.from_dict(cfg)
    if stored_hash is not None and stored_hash != config.config_hash():
        raise DatasetFormatError(f"{root / 'config.json'}: config hash mismatch")
    labels = dict(_read_pairs(root / "labels.txt", (int, int)))
    splits = dict(_read_pairs(root / "split.txt", (int, str)))
    classes = [name for _, name in sorted(_read_pairs(root / "classes.txt", (int, str)))]
    sizes = {i: config.image_size for i in labels}
    try:
        anns = {a.image_id: a for a in read_parts_file(root / "parts.txt", sizes)}
    except AnnotationParseError as exc:
        raise DatasetFormatError(str(exc)) from None
    out = {"train": [], "test": []}
    for image_id, label in labels.items():
        if image_id not in anns or image_id not in splits:
            raise DatasetFormatError(f"{root}: image {image_id} lacks annotations or a split entry")
        path = root / "images" / f"{image_id}.png"
        try:
            with Image.open(path) as im:
                u8 = np.asarray(im.convert("RGB"))
        except (OSError, ValueError) as exc:
            raise DatasetFormatError(f"{path}: {exc}") from None
        if splits[image_id] not in out:
            raise DatasetFormatError(f"{root / 'split.txt'}: unknown split {splits[image_id]!r}")
        out[splits[image_id]].append(Sample(image_id, u8.astype(np.float64) / 255.0, label, anns[image_id]))
    return Dataset(config, out["train"], out["test"], classes)
