"""Two-stream part/object classification network.

The part crop layer gathers a fixed window of shared trunk features around
each detected part; its backward pass scatters each window's gradient back
to where it came from and sums overlaps. Part features from a shared head
and the object feature each pass through their own scale layer before being
fused (concatenation, sum, max or mean+max) and classified.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from . import kernels
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .core import (
    Parameter,
    Tensor,
    concat,
    dense,
    pool2d,
    record,
    relu,
    reshape,
    softmax,
    softmax_cross_entropy,
    spatial_mean,
)
from .locnet import PartLocations
from .toynet import Conv, Trunk
from .training import fit

FUSION_MODES = ("FC", "SS", "SM", "SMM")

PART_PRESETS = {"top3": 3, "top5": 5, "top9": 9, "all15": 15}


@dataclass(frozen=True)
class CropSpec:
    rows: int = 7
    cols: int = 7

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("crop window must be positive")


# ---------------------------------------------------------------- part crop


def _as_locs(locs) -> np.ndarray:
    if isinstance(locs, PartLocations):
        locs = locs.coords
    elif isinstance(locs, (list, tuple)) and locs and isinstance(locs[0], PartLocations):
        locs = np.stack([p.coords for p in locs])
    return np.asarray(locs, dtype=np.int64)


def resolve_windows(locs, feature_hw, spec: CropSpec = CropSpec()):
    """Window origins (…, M, 2) and presence mask for grid locations.

    A window is centered on its part and then shifted, never truncated, to
    lie inside the feature map. Sentinel (-1, -1) locations are masked out.
    """
    locs = _as_locs(locs)
    fh, fw = feature_hw
    if spec.rows > fh or spec.cols > fw:
        raise ValueError(f"crop window {spec.rows}x{spec.cols} larger than feature map {fh}x{fw}")
    mask = locs[..., 0] >= 0
    bad = mask & ((locs[..., 0] >= fh) | (locs[..., 1] >= fw) | (locs[..., 1] < 0))
    if bad.any():
        raise ValueError(f"part location outside the {fh}x{fw} feature grid")
    origins = np.empty_like(locs)
    origins[..., 0] = np.clip(locs[..., 0] - spec.rows // 2, 0, fh - spec.rows)
    origins[..., 1] = np.clip(locs[..., 1] - spec.cols // 2, 0, fw - spec.cols)
    origins[~mask] = 0
    return origins, mask


def part_crop_forward(features: np.ndarray, locs, spec: CropSpec = CropSpec()):
    """Crop (C,H,W) or (N,C,H,W) features; returns (crops, mask, origins).

    Crops are (…, M, C, rows, cols); masked parts are zero-filled.
    """
    single = features.ndim == 3
    x = features[None] if single else features
    loc = _as_locs(locs)
    loc = loc[None] if single else loc
    origins, mask = resolve_windows(loc, x.shape[2:], spec)
    crops = kernels.crop_gather(np.ascontiguousarray(x, dtype=np.float64), origins, mask, spec.rows, spec.cols)
    if single:
        return crops[0], mask[0], origins[0]
    return crops, mask, origins


def part_crop_backward(grad_crops: np.ndarray, origins: np.ndarray, mask: np.ndarray, feature_hw) -> np.ndarray:
    """Scatter crop gradients back onto the feature map and sum them.

    Positions covered by no window get zero; masked parts contribute nothing.
    """
    single = grad_crops.ndim == 4
    g = grad_crops[None] if single else grad_crops
    o = origins[None] if single else origins
    m = mask[None] if single else mask
    if o.shape[:2] != g.shape[:2] or m.shape != o.shape[:2]:
        raise ValueError("crop gradients do not match the resolved windows")
    out = kernels.crop_scatter(np.ascontiguousarray(g, dtype=np.float64), o, m, *feature_hw)
    return out[0] if single else out


def part_crop(features: Tensor, locs, spec: CropSpec = CropSpec()):
    """Differentiable crop of (N,C,H,W) features; returns (crops Tensor, mask)."""
    crops, mask, origins = part_crop_forward(features.data, locs, spec)
    hw = features.shape[2:]

    def backward(g):
        return (part_crop_backward(g, origins, mask, hw),)

    return record((features,), crops, backward), mask


# ---------------------------------------------------------------- scale and fusion


def scale_layer(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """y = gamma * x + beta with gamma/beta broadcast over x's trailing axes."""
    if gamma.shape != beta.shape or tuple(x.shape[x.ndim - gamma.ndim:]) != gamma.shape:
        raise ValueError(f"scale parameters {gamma.shape}/{beta.shape} do not match input {x.shape}")
    lead = tuple(range(x.ndim - gamma.ndim))

    def backward(g):
        return g * gamma.data, (g * x.data).sum(axis=lead), g.sum(axis=lead)

    return record((x, gamma, beta), gamma.data * x.data + beta.data, backward)


def fused_width(mode: str, n_branches: int, d: int) -> int:
    if mode == "FC":
        return n_branches * d
    if mode in ("SS", "SM"):
        return d
    if mode == "SMM":
        return 2 * d
    raise ValueError(f"unknown fusion mode {mode!r}; choose from {FUSION_MODES}")


def _first_max(vals: np.ndarray, mask: np.ndarray):
    masked = np.where(mask[..., None], vals, -np.inf)
    arg = masked.argmax(axis=1)  # first occurrence: ties go to the lowest branch
    return np.take_along_axis(masked, arg[:, None], axis=1)[:, 0], arg


def fuse(branches: Tensor, mask, mode: str = "SMM") -> Tensor:
    """Fuse (N, B, d) branch features; only branches with ``mask`` set take part.

    FC concatenates all B slots in order with absent ones zeroed; SS sums,
    SM takes the elementwise max and SMM concatenates mean and max over the
    present branches.
    """
    if branches.ndim == 2:
        branches = reshape(branches, (1,) + branches.shape)
    n, b, d = branches.shape
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), (n, b))
    if not mask.any(axis=1).all():
        raise ValueError("every sample needs at least one present branch")
    fused_width(mode, b, d)
    x = branches.data
    mf = mask[..., None].astype(np.float64)

    if mode == "FC":
        out = (x * mf).reshape(n, b * d)
        return record((branches,), out, lambda g: (g.reshape(n, b, d) * mf,))
    if mode == "SS":
        out = (x * mf).sum(axis=1)
        return record((branches,), out, lambda g: (g[:, None, :] * mf,))

    mx, arg = _first_max(x, mask)
    onehot = (np.arange(b)[None, :, None] == arg[:, None, :]).astype(np.float64)
    if mode == "SM":
        return record((branches,), mx, lambda g: (g[:, None, :] * onehot,))
    if mode == "SMM":
        count = mf.sum(axis=1)
        mean = (x * mf).sum(axis=1) / count

        def backward(g):
            gm, gx = g[:, :d], g[:, d:]
            return ((gm / count)[:, None, :] * mf + gx[:, None, :] * onehot,)

        return record((branches,), np.concatenate([mean, mx], axis=1), backward)
    raise ValueError(f"unknown fusion mode {mode!r}; choose from {FUSION_MODES}")


# ---------------------------------------------------------------- model


def resolve_part_subset(parts, n_parts: int) -> list:
    """Part indices from a preset (top3/top5/top9/all15), 'none', or a comma list.

    Presets take the first N parts, clamped to the parts available.
    """
    if parts is None or parts == "all":
        return list(range(n_parts))
    if isinstance(parts, str):
        if parts in PART_PRESETS:
            return list(range(min(PART_PRESETS[parts], n_parts)))
        if parts in ("", "none"):
            return []
        parts = [int(p) for p in parts.split(",")]
    subset = [int(p) for p in parts]
    if any(p < 0 or p >= n_parts for p in subset):
        raise ValueError(f"part subset {subset} references a part outside [0, {n_parts})")
    if len(set(subset)) != len(subset):
        raise ValueError(f"part subset {subset} repeats a part")
    return subset


class TwoStreamModel:
    """Shared trunk -> (object head | part crop -> shared part head) -> scale -> fuse -> classifier.

    Branch 0 is the object stream; branches 1..P follow ``part_subset``.
    """

    def __init__(self, n_classes: int, n_parts: int, part_subset=None, fusion: str = "SMM",
                 channels=(16, 32, 32), feat_dim: int = 32, crop: int = 7, image_size=(112, 112), seed: int = 0):
        if fusion not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {fusion!r}; choose from {FUSION_MODES}")
        rng = np.random.default_rng(seed)
        self.n_classes = n_classes
        self.n_parts = n_parts
        self.part_subset = resolve_part_subset(part_subset, n_parts)
        self.fusion = fusion
        self.feat_dim = feat_dim
        self.crop = CropSpec(crop, crop)
        self.image_size = tuple(image_size)
        self.seed = seed
        c = channels[-1]
        self.trunk = Trunk(channels, rng, name="cls.trunk")
        self.obj1 = Conv("cls.obj.conv1", c, feat_dim, 3, rng, padding=1)
        self.obj2 = Conv("cls.obj.conv2", feat_dim, feat_dim, 3, rng, padding=1)
        self.part1 = Conv("cls.part.conv1", c, feat_dim, 3, rng, padding=1)
        self.part2 = Conv("cls.part.conv2", feat_dim, feat_dim, 3, rng, padding=1)
        nb = self.n_branches
        self.gamma = Parameter(np.ones((nb, feat_dim)), name="cls.scale.gamma")
        self.beta = Parameter(np.zeros((nb, feat_dim)), name="cls.scale.beta")
        width = fused_width(fusion, nb, feat_dim)
        self.fc_w = Parameter(rng.normal(0.0, np.sqrt(1.0 / width), size=(width, n_classes)), name="cls.fc.w")
        self.fc_b = Parameter(np.zeros(n_classes), name="cls.fc.b")

    @property
    def n_branches(self) -> int:
        return 1 + len(self.part_subset)

    @property
    def trunk_calls(self) -> int:
        return self.trunk.calls

    def config(self) -> dict:
        return {
            "kind": "two_stream",
            "n_classes": self.n_classes,
            "n_parts": self.n_parts,
            "part_subset": list(self.part_subset),
            "fusion": self.fusion,
            "channels": list(self.trunk.channels),
            "feat_dim": self.feat_dim,
            "crop": self.crop.rows,
            "image_size": list(self.image_size),
            "seed": self.seed,
        }

    def params(self) -> Dict[str, Parameter]:
        out = self.trunk.params()
        for conv in (self.obj1, self.obj2, self.part1, self.part2):
            out.update(conv.params())
        for p in (self.gamma, self.beta, self.fc_w, self.fc_b):
            out[p.name] = p
        return out

    def object_feature(self, fmap: Tensor) -> Tensor:
        h = relu(self.obj1(pool2d(fmap, "max", 2, 2)))
        h = relu(self.obj2(pool2d(h, "max", 2, 2)))
        return spatial_mean(h)

    def part_features(self, fmap: Tensor, locs):
        """Shared part head on every crop; returns ((N, P, d) Tensor, (N, P) mask)."""
        n = fmap.shape[0]
        p = len(self.part_subset)
        sub = _as_locs(locs)[:, self.part_subset]
        crops, mask = part_crop(fmap, sub, self.crop)
        flat = reshape(crops, (n * p, fmap.shape[1], self.crop.rows, self.crop.cols))
        h = relu(self.part2(relu(self.part1(flat))))
        return reshape(spatial_mean(h), (n, p, self.feat_dim)), mask

    def forward(self, images: Tensor, locs=None, keep=None) -> dict:
        """Run one trunk pass per image and both streams.

        ``locs`` is (N, n_parts, 2) grid coordinates with (-1, -1) for
        missing parts. ``keep`` optionally masks branches further: an
        (N, P) or (P,) boolean over the part subset.
        """
        if not isinstance(images, Tensor):
            images = Tensor(images)
        return self.forward_from_map(self.trunk(images), locs, keep)

    def forward_from_map(self, fmap: Tensor, locs=None, keep=None) -> dict:
        """Everything after the trunk, given its (N, C, h, w) output."""
        n = fmap.shape[0]
        obj = reshape(self.object_feature(fmap), (n, 1, self.feat_dim))
        mask = np.ones((n, 1), dtype=bool)
        branches = obj
        part_feats = None
        if self.part_subset:
            if locs is None:
                raise ValueError("part locations are required when the part subset is nonempty")
            loc_arr = _as_locs(locs)
            if loc_arr.ndim != 3 or loc_arr.shape[:2] != (n, self.n_parts):
                raise ValueError(f"locations {loc_arr.shape} do not match {n} images x {self.n_parts} parts")
            part_feats, pmask = self.part_features(fmap, loc_arr)
            if keep is not None:
                pmask = pmask & np.broadcast_to(np.asarray(keep, dtype=bool), pmask.shape)
            branches = concat([obj, part_feats], axis=1)
            mask = np.concatenate([mask, pmask], axis=1)
        scaled = scale_layer(branches, self.gamma, self.beta)
        fused = fuse(scaled, mask, self.fusion)
        logits = dense(fused, self.fc_w, self.fc_b)
        return {"logits": logits, "part_features": part_feats, "mask": mask}

    def __call__(self, images, locs=None, keep=None) -> Tensor:
        return self.forward(images, locs, keep)["logits"]

    @property
    def trunk_frozen(self) -> bool:
        return not any(p.requires_grad for p in self.trunk.params().values())

    def freeze_trunk(self) -> None:
        for p in self.trunk.params().values():
            p.lr_mult = 0.0
            p.requires_grad = False

    def trunk_maps(self, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
        return np.concatenate(
            [self.trunk(Tensor(images[s:s + batch_size])).data for s in range(0, len(images), batch_size)]
        )

    def predict_proba(self, images: np.ndarray, locs=None, keep=None, batch_size: int = 32) -> np.ndarray:
        out = []
        loc_arr = None if locs is None else _as_locs(locs)
        for s in range(0, len(images), batch_size):
            sl = slice(s, s + batch_size)
            k = keep[sl] if keep is not None and np.ndim(keep) == 2 else keep
            logits = self(Tensor(images[sl]), None if loc_arr is None else loc_arr[sl], k)
            out.append(softmax(logits.data, axis=1))
        return np.concatenate(out, axis=0)

    def part_embeddings(self, images: np.ndarray, locs, batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
        """(N, P, d) part-head features and (N, P) presence for every image."""
        feats, masks = [], []
        loc_arr = _as_locs(locs)
        for s in range(0, len(images), batch_size):
            fmap = self.trunk(Tensor(images[s:s + batch_size]))
            f, m = self.part_features(fmap, loc_arr[s:s + batch_size])
            feats.append(f.data)
            masks.append(m)
        return np.concatenate(feats), np.concatenate(masks)


def model_forward(model: TwoStreamModel, image, locs) -> np.ndarray:
    """Class logits for one (3,H,W) image or an (N,3,H,W) batch."""
    img = np.asarray(image, dtype=np.float64)
    single = img.ndim == 3
    loc = _as_locs(locs) if locs is not None else None
    if single:
        img = img[None]
        loc = None if loc is None else loc[None]
    logits = model(Tensor(img), loc).data
    return logits[0] if single else logits


def train_classifier(model: TwoStreamModel, images: np.ndarray, labels: np.ndarray, locs, epochs: int = 30,
                     lr: float = 0.01, momentum: float = 0.9, batch_size: int = 16, seed: int = 0,
                     part_dropout: float = 0.0, on_epoch=None) -> list[float]:
    """Fit the classifier on fixed part locations; returns per-epoch mean loss.

    The locations come from a frozen localization net (or ground truth) and
    are never updated here. ``part_dropout`` hides each part branch with the
    given probability per sample and step.
    """
    loc_arr = _as_locs(locs)
    labels = np.asarray(labels, dtype=np.int64)
    drop_rng = np.random.default_rng([seed, 1])
    p = len(model.part_subset)

    # a frozen trunk gives the same maps every epoch: run it once per image
    maps = model.trunk_maps(images) if model.trunk_frozen else None

    def batch_loss(idx):
        keep = None
        if part_dropout > 0 and p:
            keep = drop_rng.random((len(idx), p)) >= part_dropout
        sub = loc_arr[idx] if p else None
        if maps is not None:
            logits = model.forward_from_map(Tensor(maps[idx]), sub, keep)["logits"]
        else:
            logits = model(Tensor(images[idx]), sub, keep)
        return softmax_cross_entropy(logits, labels[idx])

    return fit(model.params().values(), len(images), batch_loss, epochs, lr, momentum, batch_size, seed, on_epoch)


# ---------------------------------------------------------------- persistence


def save_model(path, model, extra: Optional[dict] = None) -> None:
    manifest = {"model": model.config()}
    if getattr(model, "frozen", False):
        manifest["frozen"] = True
    if getattr(model, "trunk_frozen", False):
        manifest["trunk_frozen"] = True
    manifest.update(extra or {})
    save_checkpoint(path, manifest, {name: p.data for name, p in model.params().items()})


def load_model(path):
    """Rebuild a LocalizationNet or TwoStreamModel from a checkpoint; returns (model, manifest)."""
    from .locnet import LocalizationNet

    manifest, arrays = load_checkpoint(path)
    cfg = dict(manifest.get("model", {}))
    kind = cfg.pop("kind", None)
    if kind == "localization":
        model = LocalizationNet(**cfg)
    elif kind == "two_stream":
        model = TwoStreamModel(**cfg)
    else:
        raise CheckpointError(f"{path}: unknown model kind {kind!r}")
    params = model.params()
    if set(params) != set(arrays):
        raise CheckpointError(f"{path}: parameter names do not match a {kind} model")
    for name, p in params.items():
        if p.data.shape != arrays[name].shape:
            raise CheckpointError(f"{path}: parameter {name} has shape {arrays[name].shape}, expected {p.data.shape}")
        p.data[...] = arrays[name]
    if manifest.get("frozen") and hasattr(model, "freeze"):
        model.freeze()
    if manifest.get("trunk_frozen") and hasattr(model, "freeze_trunk"):
        model.freeze_trunk()
    return model, manifest


def copy_trunk(src: Trunk, dst: Trunk) -> None:
    """Initialise ``dst`` from ``src`` weights (same channel layout required)."""
    for (_, a), (_, b) in zip(sorted(src.params().items()), sorted(dst.params().items())):
        if a.data.shape != b.data.shape:
            raise ValueError("trunks differ in shape")
        b.data[...] = a.data


def object_only_logits(model: TwoStreamModel, images: np.ndarray) -> np.ndarray:
    """Logits with every part branch masked out."""
    n = len(images)
    locs = np.full((n, model.n_parts, 2), -1, dtype=np.int64)
    return model(Tensor(images), locs if model.part_subset else None).data


__all__: Sequence[str] = [
    "CropSpec",
    "FUSION_MODES",
    "TwoStreamModel",
    "copy_trunk",
    "fuse",
    "fused_width",
    "load_model",
    "model_forward",
    "part_crop",
    "part_crop_backward",
    "part_crop_forward",
    "resolve_part_subset",
    "resolve_windows",
    "save_model",
    "scale_layer",
    "train_classifier",
]
