"""Model checkpoint archive.

A checkpoint is a zip file holding ``manifest.json`` and one raw
little-endian float64 blob per named parameter under ``params/``. The
manifest records each array's shape and the archive format version.
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

FORMAT_VERSION = 1
_MANIFEST = "manifest.json"
# fixed timestamp so identical models produce identical archives
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def save_checkpoint(path, manifest: Mapping, arrays: Mapping[str, np.ndarray]) -> None:
    meta = dict(manifest)
    meta["format_version"] = FORMAT_VERSION
    meta["params"] = {name: list(np.shape(a)) for name, a in sorted(arrays.items())}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo(_MANIFEST, date_time=_EPOCH)
        zf.writestr(info, json.dumps(meta, indent=2, sort_keys=True), compress_type=zipfile.ZIP_DEFLATED)
        for name in sorted(arrays):
            blob = np.ascontiguousarray(arrays[name], dtype="<f8").tobytes()
            zf.writestr(zipfile.ZipInfo(f"params/{name}", date_time=_EPOCH), blob, compress_type=zipfile.ZIP_DEFLATED)


def load_checkpoint(path) -> tuple[dict, Dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise CheckpointError(f"{path}: not a checkpoint archive ({exc})") from None
    with zf:
        try:
            meta = json.loads(zf.read(_MANIFEST))
        except KeyError:
            raise CheckpointError(f"{path}: missing {_MANIFEST}") from None
        version = meta.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointVersionError(f"{path}: unsupported checkpoint format version {version!r} (expected {FORMAT_VERSION})")
        arrays = {}
        for name, shape in meta["params"].items():
            blob = zf.read(f"params/{name}")
            arr = np.frombuffer(blob, dtype="<f8")
            if arr.size != int(np.prod(shape)):
                raise CheckpointError(f"{path}: parameter {name} has {arr.size} values, manifest says shape {shape}")
            arrays[name] = arr.reshape(shape).astype(np.float64)
    return meta, arrays
