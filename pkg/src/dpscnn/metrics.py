"""Keypoint and classification scores.

Predictions are :class:`KeypointPrediction` records: M pixel points (NaN rows
for missing parts) plus one confidence per part. Distances are judged against
``alpha * max(H, W)`` of the ground-truth image, inclusive.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from .locnet import KeypointAnnotation, PartLocations, grid_to_pixels
from .netgeom import CandidateGrid, RFSpec

SCHEMA_VERSION = 1
# distances equal to the threshold up to rounding count as inside
BOUNDARY_RTOL = 1e-9
DEFAULT_ALPHAS = (0.1, 0.05, 0.02)


@dataclass(eq=False)
class KeypointPrediction:
    image_id: int
    points: np.ndarray
    confidence: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if self.confidence is not None:
            self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(-1)

    @property
    def present(self) -> np.ndarray:
        return ~np.isnan(self.points).any(axis=1)


def prediction_from_locations(image_id: int, loc: PartLocations, rf: RFSpec) -> KeypointPrediction:
    pix = grid_to_pixels(loc, rf)
    pts = np.array([p if p is not None else (np.nan, np.nan) for p in pix], dtype=np.float64).reshape(-1, 2)
    return KeypointPrediction(image_id, pts, np.asarray(loc.confidence, dtype=np.float64))


def _threshold(gt: KeypointAnnotation, alpha: float) -> float:
    if max(gt.image_size) <= 0:
        raise ValueError(f"image {gt.image_id} has no image size")
    return alpha * max(gt.image_size) * (1.0 + BOUNDARY_RTOL)


def _check_alpha(alpha: float) -> None:
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")


@dataclass
class PckResult:
    alpha: float
    correct: np.ndarray
    total: np.ndarray
    per_part: np.ndarray = field(init=False)
    average: float = field(init=False)

    def __post_init__(self):
        with np.errstate(invalid="ignore", divide="ignore"):
            self.per_part = np.where(self.total > 0, self.correct / np.maximum(self.total, 1), np.nan)
        scored = self.total > 0
        self.average = float(self.per_part[scored].mean()) if scored.any() else float("nan")


def pck(preds: Sequence[KeypointPrediction], gts: Sequence[KeypointAnnotation], alpha: float) -> PckResult:
    """Per-part fraction of visible keypoints predicted within the distance threshold."""
    _check_alpha(alpha)
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} annotations")
    if not gts:
        raise ValueError("no annotations to score")
    m = gts[0].n_parts
    correct = np.zeros(m, dtype=np.int64)
    total = np.zeros(m, dtype=np.int64)
    for p, g in zip(preds, gts):
        if p.image_id != g.image_id:
            raise ValueError(f"prediction for image {p.image_id} aligned with annotation of image {g.image_id}")
        if p.points.shape[0] != m or g.n_parts != m:
            raise ValueError(f"image {g.image_id}: part counts disagree")
        dist = np.hypot(*(p.points - g.points).T)
        hit = g.visible & p.present & (dist <= _threshold(g, alpha))
        total += g.visible
        correct += hit
    return PckResult(alpha, correct, total)


@dataclass
class ApkResult:
    alpha: float
    per_part: np.ndarray
    n_gt: np.ndarray

    @property
    def apk(self) -> float:
        scored = self.n_gt > 0
        return float(self.per_part[scored].mean()) if scored.any() else float("nan")


def average_precision(is_tp: np.ndarray, n_gt: int) -> float:
    """All-point AP of a ranked TP/FP sequence: sum of precision at each TP times 1/n_gt."""
    if n_gt <= 0:
        return float("nan")
    is_tp = np.asarray(is_tp, dtype=bool)
    if not is_tp.any():
        return 0.0
    precision = np.cumsum(is_tp) / np.arange(1, is_tp.size + 1)
    return float(precision[is_tp].sum() / n_gt)


def apk(preds: Sequence[KeypointPrediction], gts: Sequence[KeypointAnnotation], alpha: float) -> ApkResult:
    """Average precision per part with greedy matching in confidence order.

    Several predictions may refer to the same image; each visible keypoint
    can be claimed once. Equal confidences rank in image-id order, then in
    input order.
    """
    _check_alpha(alpha)
    if not gts:
        raise ValueError("no annotations to score")
    by_id: Dict[int, KeypointAnnotation] = {g.image_id: g for g in gts}
    m = gts[0].n_parts
    n_gt = np.array([sum(int(g.visible[c]) for g in gts) for c in range(m)], dtype=np.int64)
    per_part = np.zeros(m)
    for p in preds:
        if p.image_id not in by_id:
            raise ValueError(f"prediction for unknown image {p.image_id}")
        if p.confidence is None or p.confidence.shape[0] != m:
            raise ValueError(f"prediction for image {p.image_id} lacks per-part confidences")
        if np.isnan(p.confidence[p.present]).any():
            raise ValueError(f"prediction for image {p.image_id} has a missing confidence")
    for c in range(m):
        ranked = [(-p.confidence[c], p.image_id, i) for i, p in enumerate(preds) if p.present[c]]
        ranked.sort()
        claimed = set()
        flags = []
        for _, image_id, i in ranked:
            g = by_id[image_id]
            ok = False
            if g.visible[c] and image_id not in claimed:
                d = float(np.hypot(*(preds[i].points[c] - g.points[c])))
                ok = d <= _threshold(g, alpha)
            if ok:
                claimed.add(image_id)
            flags.append(ok)
        per_part[c] = average_precision(np.array(flags, dtype=bool), int(n_gt[c]))
    return ApkResult(alpha, per_part, n_gt)


def candidate_recall(grid: CandidateGrid, gts: Sequence[KeypointAnnotation], alpha: float) -> np.ndarray:
    """Per part, the fraction of visible keypoints with some grid center in range."""
    _check_alpha(alpha)
    if not gts:
        raise ValueError("no annotations to score")
    m = gts[0].n_parts
    hits = np.zeros(m)
    total = np.zeros(m)
    dims = np.array([grid.rows, grid.cols])
    for g in gts:
        # on a regular lattice the nearest center is the per-axis nearest
        idx = np.clip(np.rint((g.points - grid.start) / grid.jump), 0, dims - 1)
        nearest = grid.start + idx * grid.jump
        near = np.hypot(*(g.points - nearest).T) <= _threshold(g, alpha)
        total += g.visible
        hits += g.visible & near
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(total > 0, hits / np.maximum(total, 1), np.nan)


def accuracy(logits, labels) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("accuracy of an empty set")
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ValueError(f"logits {logits.shape} and labels {labels.shape} do not align")
    return float((logits.argmax(axis=1) == labels).mean())


# ---------------------------------------------------------------- reports


def _num(v) -> Optional[float]:
    v = float(v)
    return None if np.isnan(v) else v


def evaluation_report(
    pck_results: Sequence[PckResult] = (),
    apk_result: Optional[ApkResult] = None,
    accuracy_value: Optional[float] = None,
    part_names: Optional[Sequence[str]] = None,
    extra: Optional[dict] = None,
) -> dict:
    report: dict = {"schema_version": SCHEMA_VERSION}
    if extra:
        report.update(extra)
    m = None
    if pck_results:
        m = len(pck_results[0].per_part)
    elif apk_result is not None:
        m = len(apk_result.per_part)
    names = list(part_names) if part_names is not None else [f"part{i + 1}" for i in range(m or 0)]
    report["parts"] = names
    report["pck"] = [
        {
            "alpha": r.alpha,
            "per_part": [_num(v) for v in r.per_part],
            "correct": r.correct.tolist(),
            "total": r.total.tolist(),
            "average": _num(r.average),
        }
        for r in pck_results
    ]
    if apk_result is not None:
        report["apk"] = {
            "alpha": apk_result.alpha,
            "per_part": [_num(v) for v in apk_result.per_part],
            "mean": _num(apk_result.apk),
        }
    if accuracy_value is not None:
        report["accuracy"] = float(accuracy_value)
    return report


def report_rows(report: dict) -> list:
    """Flatten a report into (metric, alpha, part, value) rows."""
    rows = []
    names = report.get("parts", [])
    for block in report.get("pck", []):
        for name, v in zip(names, block["per_part"]):
            rows.append(("pck", block["alpha"], name, v))
        rows.append(("pck", block["alpha"], "average", block["average"]))
    if "apk" in report:
        for name, v in zip(names, report["apk"]["per_part"]):
            rows.append(("ap", report["apk"]["alpha"], name, v))
        rows.append(("apk", report["apk"]["alpha"], "average", report["apk"]["mean"]))
    if "accuracy" in report:
        rows.append(("accuracy", "", "", report["accuracy"]))
    return rows


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def dumps_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "alpha", "part", "value"])
    for metric, alpha, part, value in report_rows(report):
        w.writerow([metric, alpha, part, "" if value is None else repr(float(value))])
    return buf.getvalue()


def write_report(report: dict, json_path, csv_path=None) -> None:
    with open(json_path, "w", encoding="utf-8") as f:
        f.write(dumps_report(report))
    if csv_path is not None:
        with open(csv_path, "w", encoding="utf-8") as f:
            f.write(dumps_csv(report))
