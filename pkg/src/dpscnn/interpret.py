"""Part-level explanations of a trained two-stream classifier.

A score tensor holds, for every sample and part, the class distribution the
classifier produces when only that part's branch (plus the object stream) is
kept. From it we pick the part that best separates a class from all others
or from one neighbouring class, and assemble a per-class manual.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import Tensor, softmax

MANUAL_SCHEMA_VERSION = 1


@dataclass
class ScoreTensor:
    probs: np.ndarray  # (N, P, K)
    labels: np.ndarray  # (N,)
    flagged_parts: list = field(default_factory=list)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.probs.ndim != 3 or min(self.probs.shape) < 1:
            raise ValueError(f"score tensor must be (N, P, K) with all sizes >= 1, got {self.probs.shape}")
        if self.labels.shape != (self.probs.shape[0],):
            raise ValueError("labels do not match the sample axis")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ValueError("labels outside the class range")
        if not np.allclose(self.probs.sum(axis=2), 1.0, atol=1e-6):
            raise ValueError("every (sample, part) row must sum to 1")

    @property
    def n_parts(self) -> int:
        return self.probs.shape[1]

    @property
    def n_classes(self) -> int:
        return self.probs.shape[2]


def score_tensor(model, images: np.ndarray, locs, labels, batch_size: int = 32) -> ScoreTensor:
    """Evaluate ``model`` once per part of its subset with all other part branches masked.

    A part missing in every image has nothing to say; its column is filled
    with the uniform distribution and its index is listed in ``flagged_parts``.
    """
    locs = np.asarray(locs, dtype=np.int64)
    p = len(model.part_subset)
    if p == 0:
        raise ValueError("model has no part branches to score")
    n, k = len(images), model.n_classes
    probs = np.empty((n, p, k))
    for s in range(0, n, batch_size):
        sl = slice(s, s + batch_size)
        fmap = model.trunk(Tensor(images[sl]))
        for j in range(p):
            keep = np.zeros(p, dtype=bool)
            keep[j] = True
            logits = model.forward_from_map(fmap, locs[sl], keep)["logits"].data
            probs[sl, j] = softmax(logits, axis=1)
    present = locs[:, model.part_subset, 0] >= 0
    flagged = [j for j in range(p) if not present[:, j].any()]
    for j in flagged:
        probs[:, j] = 1.0 / k
    return ScoreTensor(probs, labels, flagged)


def _members(S: ScoreTensor, k: int) -> np.ndarray:
    if not 0 <= k < S.n_classes:
        raise ValueError(f"class {k} outside [0, {S.n_classes})")
    idx = np.flatnonzero(S.labels == k)
    if idx.size == 0:
        raise ValueError(f"class {k} has no samples")
    return idx


def one_vs_rest_scores(S: ScoreTensor, k: int) -> np.ndarray:
    """Per part, the summed class-k probability over class-k samples."""
    return S.probs[_members(S, k), :, k].sum(axis=0)


def one_vs_rest(S: ScoreTensor, k: int) -> int:
    return int(np.argmax(one_vs_rest_scores(S, k)))


@dataclass
class PairScores:
    scores: np.ndarray  # per part
    n_samples: int
    degenerate: int  # (sample, part) terms whose two probabilities were both zero

    @property
    def confidence(self) -> np.ndarray:
        return self.scores / self.n_samples


def one_vs_one_scores(S: ScoreTensor, k: int, l: int) -> PairScores:
    if k == l:
        raise ValueError("one-vs-one needs two different classes")
    ik, il = _members(S, k), _members(S, l)
    bad = 0

    def renorm(rows, c):
        nonlocal bad
        pk, pl = S.probs[rows, :, k], S.probs[rows, :, l]
        den = pk + pl
        zero = den <= 0
        bad += int(zero.sum())
        own = pk if c == k else pl
        return np.where(zero, 0.5, own / np.where(zero, 1.0, den))

    total = renorm(ik, k).sum(axis=0) + renorm(il, l).sum(axis=0)
    return PairScores(total, ik.size + il.size, bad)


def one_vs_one(S: ScoreTensor, k: int, l: int) -> tuple[int, float]:
    """Most separating part for the pair and its confidence in [0, 1]."""
    pair = one_vs_one_scores(S, k, l)
    p = int(np.argmax(pair.scores))
    return p, float(pair.confidence[p])


def one_vs_one_ranking(S: ScoreTensor, k: int, l: int, top: int = 3) -> list[tuple[int, float]]:
    pair = one_vs_one_scores(S, k, l)
    order = np.argsort(-pair.scores, kind="stable")[:top]
    return [(int(p), float(pair.confidence[p])) for p in order]


@dataclass
class Neighbours:
    ids: np.ndarray
    distances: np.ndarray
    truncated: bool


def nearest_exemplars(query, gallery, n: int, ids: Optional[Sequence[int]] = None) -> Neighbours:
    """The ``n`` gallery rows closest to ``query`` in Euclidean distance, nearest first.

    Ties go to the lower id. Asking for more rows than exist returns the
    whole gallery with ``truncated`` set.
    """
    gallery = np.asarray(gallery, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64).reshape(-1)
    if gallery.ndim != 2 or gallery.shape[0] == 0:
        raise ValueError("gallery must be a nonempty (n, d) array")
    if gallery.shape[1] != query.shape[0]:
        raise ValueError(f"query length {query.shape[0]} differs from gallery width {gallery.shape[1]}")
    if n < 1:
        raise ValueError("n must be positive")
    ids = np.arange(gallery.shape[0]) if ids is None else np.asarray(ids, dtype=np.int64)
    dist = np.sqrt(((gallery - query) ** 2).sum(axis=1))
    order = np.lexsort((ids, dist))
    truncated = n > gallery.shape[0]
    order = order[:n]
    return Neighbours(ids[order], dist[order], truncated)


# ---------------------------------------------------------------- manuals


def similar_classes(full_probs: np.ndarray, labels: np.ndarray, k: int, count: int) -> list[int]:
    """Classes ranked by the mean probability the full model gives them on class-k samples."""
    members = np.flatnonzero(np.asarray(labels) == k)
    if members.size == 0:
        raise ValueError(f"class {k} has no samples")
    mass = np.asarray(full_probs)[members].mean(axis=0)
    mass[k] = -np.inf
    order = np.argsort(-mass, kind="stable")
    return [int(c) for c in order[:count] if np.isfinite(mass[c])]


def class_exemplars(features: np.ndarray, present: np.ndarray, labels: np.ndarray, ids, k: int, part: int,
                    n: int) -> list[int]:
    """Class-k samples whose part feature lies nearest that part's class-k mean."""
    sel = np.flatnonzero((np.asarray(labels) == k) & present[:, part])
    if sel.size == 0:
        return []
    feats = features[sel, part]
    return [int(i) for i in nearest_exemplars(feats.mean(axis=0), feats, n, np.asarray(ids)[sel]).ids]


def emit_manual(predicted: int, S: ScoreTensor, full_probs: np.ndarray, features: np.ndarray, present: np.ndarray,
                ids, neighbor_count: int = 3, class_names: Optional[Sequence[str]] = None,
                part_names: Optional[Sequence[str]] = None, n_exemplars: int = 3) -> dict:
    """Build the manual for one class.

    ``features``/``present`` are (N, P, d)/(N, P) part embeddings aligned with
    ``S``; ``full_probs`` is the complete model's (N, K) output.
    """
    names = list(class_names) if class_names is not None else [str(c) for c in range(S.n_classes)]
    pnames = list(part_names) if part_names is not None else [f"part{p + 1}" for p in range(S.n_parts)]
    best = one_vs_rest(S, predicted)
    manual = {
        "schema_version": MANUAL_SCHEMA_VERSION,
        "class": names[predicted],
        "class_index": int(predicted),
        "discriminative_part": pnames[best],
        "exemplars": {
            pnames[p]: class_exemplars(features, present, S.labels, ids, predicted, p, n_exemplars)
            for p in range(S.n_parts)
        },
        "flagged_parts": [pnames[p] for p in S.flagged_parts],
        "comparisons": [],
    }
    for other in similar_classes(full_probs, S.labels, predicted, neighbor_count):
        if not (S.labels == other).any():
            continue
        block = {"class": names[other], "class_index": other, "parts": []}
        for p, conf in one_vs_one_ranking(S, predicted, other):
            block["parts"].append({
                "part": pnames[p],
                "part_index": p,
                "confidence": conf,
                "exemplars": {
                    names[predicted]: class_exemplars(features, present, S.labels, ids, predicted, p, n_exemplars),
                    names[other]: class_exemplars(features, present, S.labels, ids, other, p, n_exemplars),
                },
            })
        manual["comparisons"].append(block)
    return manual


def manual_markdown(manual: dict) -> str:
    lines = [f"# {manual['class']}", ""]
    lines.append(f"Most distinctive part overall: **{manual['discriminative_part']}**")
    lines.append("")
    lines.append("## Exemplars")
    lines.append("")
    for part, ids in manual["exemplars"].items():
        lines.append(f"- {part}: {', '.join(str(i) for i in ids) or 'none'}")
    if manual["flagged_parts"]:
        lines += ["", f"Parts never detected: {', '.join(manual['flagged_parts'])}"]
    for block in manual["comparisons"]:
        lines += ["", f"## {manual['class']} vs {block['class']}", ""]
        lines.append(f"| part | confidence | {manual['class']} exemplars | {block['class']} exemplars |")
        lines.append("|---|---|---|---|")
        for entry in block["parts"]:
            ex = entry["exemplars"]
            mine = ", ".join(str(i) for i in ex[manual["class"]])
            theirs = ", ".join(str(i) for i in ex[block["class"]])
            lines.append(f"| {entry['part']} | ({entry['confidence']:.2f}) | {mine} | {theirs} |")
    return "\n".join(lines) + "\n"


def write_manual(manual: dict, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = "manual_" + "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in manual["class"])
    jpath, mpath = out / f"{stem}.json", out / f"{stem}.md"
    jpath.write_text(json.dumps(manual, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    mpath.write_text(manual_markdown(manual), encoding="utf-8")
    return jpath, mpath
