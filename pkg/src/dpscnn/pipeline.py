"""Two-stage training and evaluation on a synthetic dataset.

Stage one fits the localization net and freezes it. Stage two reads part
locations from that frozen net and fits a two-stream classifier whose trunk
starts from (and by default stays at) the localization trunk, so trunk maps
are computed once per image.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .locnet import LocalizationNet, build_label_map, pixels_to_grid, train_localizer
from .metrics import (
    DEFAULT_ALPHAS,
    accuracy,
    apk,
    evaluation_report,
    pck,
    prediction_from_locations,
)
from .partstack import TwoStreamModel, copy_trunk, train_classifier
from .synthdata import Dataset, Sample, images_nchw, labels_of


@dataclass
class LocHyper:
    epochs: int = 15
    lr: float = 2e-4
    momentum: float = 0.9
    batch_size: int = 16
    seed: int = 0


@dataclass
class ClsHyper:
    epochs: int = 50
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 16
    seed: int = 0
    part_dropout: float = 0.1
    train_trunk: bool = False


@dataclass
class InferenceSettings:
    mu: Optional[float] = None
    sigma: float = 1.0
    support: int = 5

    def as_dict(self) -> dict:
        return asdict(self)


def train_localization(dataset: Dataset, hp: LocHyper = LocHyper(), channels=(16, 32, 32), on_epoch=None):
    """Fit and freeze a localization net on the training split; returns (net, loss curve)."""
    cfg = dataset.config
    net = LocalizationNet(cfg.n_parts, channels, cfg.image_size, seed=hp.seed)
    _, grid = net.geometry()
    labels = np.stack([build_label_map(s.annotation, grid) for s in dataset.train])
    curve = train_localizer(net, images_nchw(dataset.train), labels, hp.epochs, hp.lr, hp.momentum,
                            hp.batch_size, hp.seed, on_epoch)
    net.freeze()
    return net, curve


def locate(net: LocalizationNet, samples: Sequence[Sample], settings: InferenceSettings = InferenceSettings()):
    """PartLocations per sample from the frozen localization net."""
    return net.predict(images_nchw(samples), settings.mu, settings.sigma, settings.support)


def location_array(locations) -> np.ndarray:
    return np.stack([loc.coords for loc in locations]).astype(np.int64)


def ground_truth_locations(net: LocalizationNet, samples: Sequence[Sample]) -> np.ndarray:
    _, grid = net.geometry()
    return np.stack([pixels_to_grid(s.annotation.points, s.annotation.visible, grid) for s in samples])


def build_classifier(dataset: Dataset, loc_net: LocalizationNet, fusion: str = "SMM", parts="all",
                     hp: ClsHyper = ClsHyper(), feat_dim: int = 32) -> TwoStreamModel:
    cfg = dataset.config
    model = TwoStreamModel(cfg.n_classes, cfg.n_parts, parts, fusion, loc_net.trunk.channels, feat_dim,
                           image_size=cfg.image_size, seed=hp.seed)
    copy_trunk(loc_net.trunk, model.trunk)
    if not hp.train_trunk:
        model.freeze_trunk()
    return model


def train_classification(dataset: Dataset, loc_net: LocalizationNet, fusion: str = "SMM", parts="all",
                         hp: ClsHyper = ClsHyper(), settings: InferenceSettings = InferenceSettings(),
                         locations: str = "predicted", on_epoch=None):
    """Fit a classifier on part locations read from the frozen ``loc_net``; returns (model, curve)."""
    if not loc_net.frozen:
        raise RuntimeError("the localization net must be frozen before training the classifier")
    model = build_classifier(dataset, loc_net, fusion, parts, hp)
    if locations == "predicted":
        locs = location_array(locate(loc_net, dataset.train, settings))
    elif locations == "gt":
        locs = ground_truth_locations(loc_net, dataset.train)
    else:
        raise ValueError(f"locations must be 'predicted' or 'gt', got {locations!r}")
    curve = train_classifier(model, images_nchw(dataset.train), labels_of(dataset.train), locs, hp.epochs, hp.lr,
                             hp.momentum, hp.batch_size, hp.seed, hp.part_dropout, on_epoch)
    return model, curve


def classify(model: TwoStreamModel, loc_net: LocalizationNet, samples: Sequence[Sample],
             settings: InferenceSettings = InferenceSettings()) -> np.ndarray:
    """(N, K) class probabilities using locations from the localization net."""
    images = images_nchw(samples)
    locs = location_array(locate(loc_net, samples, settings)) if model.part_subset else None
    return model.predict_proba(images, locs)


def evaluate(dataset: Dataset, loc_net: LocalizationNet, model: Optional[TwoStreamModel] = None,
             alphas: Sequence[float] = DEFAULT_ALPHAS, settings: InferenceSettings = InferenceSettings(),
             split: str = "test", extra: Optional[dict] = None) -> dict:
    """Metrics report for one split: PCK per alpha, APK at the largest alpha, accuracy."""
    alphas = list(alphas) or list(DEFAULT_ALPHAS)
    samples = dataset.split(split)
    rf, _ = loc_net.geometry()
    locations = locate(loc_net, samples, settings)
    preds = [prediction_from_locations(s.image_id, loc, rf) for s, loc in zip(samples, locations)]
    gts = [s.annotation for s in samples]
    pcks = [pck(preds, gts, a) for a in alphas]
    ap = apk(preds, gts, max(alphas))
    acc = None
    if model is not None:
        images = images_nchw(samples)
        probs = model.predict_proba(images, location_array(locations) if model.part_subset else None)
        acc = accuracy(probs, labels_of(samples))
    info = {"split": split, "n_images": len(samples), "inference": settings.as_dict()}
    info.update(extra or {})
    return evaluation_report(pcks, ap, acc, extra=info)
