"""``dpscnn`` command line.

Every subcommand writes ``run.json`` (the fully resolved arguments plus the
config hash) into its output directory. Failures print one JSON line on
stderr and exit with a code naming the failure class.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, CheckpointVersionError
from .interpret import emit_manual, score_tensor, write_manual
from .locnet import AnnotationParseError, LocalizationNet, grid_to_pixels
from .metrics import DEFAULT_ALPHAS, dumps_csv, dumps_report
from .netgeom import LayerFileError, format_table, load_layers, stack_grid
from .partstack import FUSION_MODES, PART_PRESETS, TwoStreamModel, load_model, save_model
from .pipeline import (
    ClsHyper,
    InferenceSettings,
    LocHyper,
    evaluate,
    locate,
    location_array,
    train_classification,
    train_localization,
)
from .synthdata import ConfigError, DatasetFormatError, SynthConfig, generate, images_nchw, labels_of, load, save
from .training import NumericalError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_CONTRACT = 4
EXIT_NUMERICAL = 5
SCHEMA_VERSION = 1

log = logging.getLogger("dpscnn")


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code = code
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, "usage", f"{self.prog}: {message}")


# ---------------------------------------------------------------- helpers


def _hash_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_run(out: Path, args, config_hash: Optional[str]) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    _write_json(out / "run.json", {
        "schema_version": SCHEMA_VERSION,
        "version": __version__,
        "config": resolved,
        "config_hash": config_hash,
    })


def _write_curve(path: Path, curve, config_hash: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "loss", "config_hash"])
        for i, v in enumerate(curve):
            w.writerow([i, repr(float(v)), config_hash])


def _settings(args) -> InferenceSettings:
    return InferenceSettings(args.mu, args.sigma, args.support)


def _load_loc(path) -> tuple[LocalizationNet, dict]:
    if path is None or not Path(path).is_file():
        raise CliError(EXIT_CONTRACT, "contract", f"localization checkpoint not found: {path}")
    model, manifest = load_model(path)
    if not isinstance(model, LocalizationNet):
        raise CliError(EXIT_CONTRACT, "contract", f"{path} is not a localization checkpoint")
    if not model.frozen:
        raise CliError(EXIT_CONTRACT, "contract", f"{path} is not frozen; train the localizer to completion first")
    return model, manifest


def _load_cls(path) -> tuple[TwoStreamModel, dict]:
    model, manifest = load_model(path)
    if not isinstance(model, TwoStreamModel):
        raise CliError(EXIT_CONTRACT, "contract", f"{path} is not a classifier checkpoint")
    return model, manifest


def _check_hashes(dataset_hash: str, manifests, allow_mixed: bool) -> None:
    for path, manifest in manifests:
        theirs = manifest.get("data_hash")
        if theirs != dataset_hash and not allow_mixed:
            raise CliError(EXIT_CONTRACT, "contract",
                           f"{path} was trained on data {theirs}, dataset is {dataset_hash}; "
                           "pass --allow-mixed-hash to override")


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    overrides = {"seed": args.seed}
    for key in ("train_per_class", "test_per_class", "occlusion", "jitter", "n_classes"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    if args.variant == "one-part":
        config = SynthConfig.one_part_difference(**overrides)
    else:
        config = SynthConfig(**overrides)
    dataset = generate(config)
    out = _out_dir(args)
    save(dataset, out)
    _write_run(out, args, config.config_hash())
    print(json.dumps({"dataset": str(out), "config_hash": config.config_hash(),
                      "train": len(dataset.train), "test": len(dataset.test)}, sort_keys=True))
    return EXIT_OK


def cmd_rfcalc(args) -> int:
    stack = load_layers(args.layers)
    rf, grid = stack_grid(stack, (args.input_size, args.input_size))
    report = {
        "schema_version": SCHEMA_VERSION,
        "layers": args.layers,
        "input_size": args.input_size,
        "rf_size": rf.size,
        "jump": rf.jump,
        "start": rf.start,
        "grid": [grid.rows, grid.cols],
    }
    if Path(args.layers).name.startswith("bn_to_4d"):
        report["note"] = "strict recurrence gives 203; a value of 204 quoted elsewhere is off by one"
    print(format_table(stack))
    print(json.dumps(report, sort_keys=True))
    if args.out:
        out = _out_dir(args)
        _write_json(out / "rf.json", report)
        _write_run(out, args, _hash_json(report))
    return EXIT_OK


def _read_dataset(path):
    return load(path)


def cmd_train_loc(args) -> int:
    dataset = _read_dataset(args.data)
    hp = LocHyper(args.epochs, args.lr, args.momentum, args.batch_size, args.seed)
    net, curve = train_localization(dataset, hp)
    out = _out_dir(args)
    data_hash = dataset.config_hash
    save_model(out / "loc.ckpt", net, {"data_hash": data_hash, "hyper": vars(hp)})
    _write_curve(out / "loc_loss.csv", curve, data_hash)
    _write_run(out, args, data_hash)
    print(json.dumps({"checkpoint": str(out / "loc.ckpt"), "final_loss": curve[-1] if curve else None}))
    return EXIT_OK


def cmd_train_cls(args) -> int:
    loc_net, loc_manifest = _load_loc(args.loc)
    dataset = _read_dataset(args.data)
    _check_hashes(dataset.config_hash, [(args.loc, loc_manifest)], args.allow_mixed_hash)
    hp = ClsHyper(args.epochs, args.lr, args.momentum, args.batch_size, args.seed, args.part_dropout,
                  args.train_trunk)
    model, curve = train_classification(dataset, loc_net, args.fusion, args.parts, hp, _settings(args),
                                        args.locations)
    out = _out_dir(args)
    data_hash = dataset.config_hash
    save_model(out / "cls.ckpt", model, {"data_hash": data_hash, "hyper": vars(hp), "inference": _settings(args).as_dict()})
    _write_curve(out / "cls_loss.csv", curve, data_hash)
    _write_run(out, args, data_hash)
    print(json.dumps({"checkpoint": str(out / "cls.ckpt"), "final_loss": curve[-1] if curve else None}))
    return EXIT_OK


def cmd_eval(args) -> int:
    dataset = _read_dataset(args.data)
    loc_net, loc_manifest = _load_loc(args.loc)
    manifests = [(args.loc, loc_manifest)]
    model = None
    if args.cls:
        model, cls_manifest = _load_cls(args.cls)
        manifests.append((args.cls, cls_manifest))
    _check_hashes(dataset.config_hash, manifests, args.allow_mixed_hash)
    alphas = args.alpha or list(DEFAULT_ALPHAS)
    extra = {"data_hash": dataset.config_hash}
    if model is not None:
        extra["fusion"] = model.fusion
        extra["part_subset"] = list(model.part_subset)
    report = evaluate(dataset, loc_net, model, alphas, _settings(args), args.split, extra)
    out = _out_dir(args)
    (out / "report.json").write_text(dumps_report(report), encoding="utf-8")
    (out / "report.csv").write_text(dumps_csv(report), encoding="utf-8")
    _write_run(out, args, dataset.config_hash)
    summary = {"accuracy": report.get("accuracy"), "pck": {str(b["alpha"]): b["average"] for b in report["pck"]},
               "apk": report["apk"]["mean"]}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _image_from_path(path, size) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            u8 = np.asarray(im.convert("RGB"))
    except OSError as exc:
        raise CliError(EXIT_IO, "io", f"{path}: {exc}") from None
    if u8.shape[:2] != tuple(size):
        raise CliError(EXIT_CONTRACT, "contract", f"{path}: image is {u8.shape[:2]}, the model expects {tuple(size)}")
    return u8.astype(np.float64) / 255.0


def cmd_infer(args) -> int:
    loc_net, _ = _load_loc(args.loc)
    model = _load_cls(args.cls)[0] if args.cls else None
    if (args.image is None) == (args.data is None):
        raise CliError(EXIT_USAGE, "usage", "give exactly one of --image or --data")
    if args.image is not None:
        ids = [Path(args.image).stem]
        images = _image_from_path(args.image, loc_net.image_size).transpose(2, 0, 1)[None]
        names = None
    else:
        dataset = _read_dataset(args.data)
        samples = dataset.split(args.split)
        ids = [s.image_id for s in samples]
        images = images_nchw(samples)
        names = dataset.class_names
    settings = _settings(args)
    rf, _ = loc_net.geometry()
    locations = loc_net.predict(images, settings.mu, settings.sigma, settings.support)
    probs = None
    if model is not None:
        probs = model.predict_proba(images, location_array(locations) if model.part_subset else None)
    results = []
    for i, (image_id, loc) in enumerate(zip(ids, locations)):
        entry = {
            "image_id": image_id,
            "parts": [None if p is None else [float(p[0]), float(p[1])] for p in grid_to_pixels(loc, rf)],
            "confidence": [float(c) for c in loc.confidence],
        }
        if probs is not None:
            entry["class_probabilities"] = [float(v) for v in probs[i]]
            k = int(np.argmax(probs[i]))
            entry["predicted_class"] = names[k] if names else k
        results.append(entry)
    out = _out_dir(args)
    _write_json(out / "predictions.json", {"schema_version": SCHEMA_VERSION, "predictions": results})
    _write_run(out, args, _hash_json(vars(settings)))
    print(json.dumps({"predictions": str(out / "predictions.json"), "count": len(results)}))
    return EXIT_OK


def cmd_manual(args) -> int:
    dataset = _read_dataset(args.data)
    loc_net, loc_manifest = _load_loc(args.loc)
    model, cls_manifest = _load_cls(args.cls)
    _check_hashes(dataset.config_hash, [(args.loc, loc_manifest), (args.cls, cls_manifest)], args.allow_mixed_hash)
    names = dataset.class_names
    if args.cls_name in names:
        k = names.index(args.cls_name)
    else:
        try:
            k = int(args.cls_name)
        except ValueError:
            raise CliError(EXIT_USAGE, "usage", f"unknown class {args.cls_name!r}") from None
        if not 0 <= k < len(names):
            raise CliError(EXIT_USAGE, "usage", f"class index {k} out of range")
    samples = dataset.split(args.split)
    settings = _settings(args)
    images = images_nchw(samples)
    locs = location_array(locate(loc_net, samples, settings))
    S = score_tensor(model, images, locs, labels_of(samples))
    full = model.predict_proba(images, locs)
    feats, present = model.part_embeddings(images, locs)
    pnames = [f"part{p + 1}" for p in model.part_subset]
    manual = emit_manual(k, S, full, feats, present, [s.image_id for s in samples], args.neighbors, names, pnames)
    manual["data_hash"] = dataset.config_hash
    out = _out_dir(args)
    jpath, mpath = write_manual(manual, out)
    _write_run(out, args, dataset.config_hash)
    print(json.dumps({"json": str(jpath), "markdown": str(mpath)}))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_inference(p) -> None:
    p.add_argument("--mu", type=float, default=None, help="detection threshold (default 2/(M+1))")
    p.add_argument("--sigma", type=float, default=1.0, help="smoothing width in grid cells")
    p.add_argument("--support", type=int, default=5, help="odd smoothing kernel size")


def _add_hyper(p, epochs, lr) -> None:
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dpscnn", description="Part localization and part-based classification on a grid.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", choices=("default", "one-part"), default="default")
    p.add_argument("--train-per-class", type=int)
    p.add_argument("--test-per-class", type=int)
    p.add_argument("--n-classes", type=int)
    p.add_argument("--occlusion", type=float)
    p.add_argument("--jitter", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("rfcalc", help="receptive field and candidate grid of a layer stack")
    p.add_argument("--layers", required=True, help="shipped config name or path to a .layers file")
    p.add_argument("--input-size", type=int, required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_rfcalc)

    defaults = LocHyper()
    p = sub.add_parser("train-loc", help="train and freeze the localization net")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_hyper(p, defaults.epochs, defaults.lr)
    p.set_defaults(func=cmd_train_loc)

    defaults = ClsHyper()
    p = sub.add_parser("train-cls", help="train the two-stream classifier on a frozen localizer")
    p.add_argument("--data", required=True)
    p.add_argument("--loc", required=True, help="frozen localization checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--fusion", choices=FUSION_MODES, default="SMM")
    p.add_argument("--parts", default="all", help=f"all, none, {'/'.join(PART_PRESETS)} or comma list of indices")
    p.add_argument("--part-dropout", type=float, default=defaults.part_dropout)
    p.add_argument("--train-trunk", action="store_true", help="fine-tune the trunk instead of keeping it fixed")
    p.add_argument("--locations", choices=("predicted", "gt"), default="predicted")
    p.add_argument("--allow-mixed-hash", action="store_true")
    _add_hyper(p, defaults.epochs, defaults.lr)
    _add_inference(p)
    p.set_defaults(func=cmd_train_cls)

    p = sub.add_parser("eval", help="PCK/APK/accuracy report")
    p.add_argument("--data", required=True)
    p.add_argument("--loc", required=True)
    p.add_argument("--cls")
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, action="append", help="repeatable; default 0.1, 0.05, 0.02")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--allow-mixed-hash", action="store_true")
    _add_inference(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="part locations and class probabilities per image")
    p.add_argument("--loc", required=True)
    p.add_argument("--cls")
    p.add_argument("--image")
    p.add_argument("--data")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out", required=True)
    _add_inference(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("manual", help="part-based comparison manual for one class")
    p.add_argument("--data", required=True)
    p.add_argument("--loc", required=True)
    p.add_argument("--cls", required=True)
    p.add_argument("--class", dest="cls_name", required=True, help="class name or index")
    p.add_argument("--neighbors", type=int, default=3)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--allow-mixed-hash", action="store_true")
    _add_inference(p)
    p.set_defaults(func=cmd_manual)
    return parser


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "code": code, "message": message}, sort_keys=True), file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except CliError as exc:
        return _fail(exc.code, exc.kind, str(exc))
    except CheckpointVersionError as exc:
        return _fail(EXIT_CONTRACT, "checkpoint_version", str(exc))
    except (DatasetFormatError, AnnotationParseError, LayerFileError, CheckpointError) as exc:
        return _fail(EXIT_IO, "parse", str(exc))
    except ConfigError as exc:
        return _fail(EXIT_CONTRACT, "config", str(exc))
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        return _fail(EXIT_IO, "io", str(exc))
    except NumericalError as exc:
        return _fail(EXIT_NUMERICAL, "numerical", str(exc))
    except (ValueError, RuntimeError) as exc:
        return _fail(EXIT_CONTRACT, "contract", str(exc))


if __name__ == "__main__":
    sys.exit(main())
