"""Checkpoint container: named float32 arrays + a JSON metadata sidecar.

Format (version 1):
  <path>           an uncompressed .npz archive of named float32 arrays
  <path>.json      {"format_version": 1, "kind": ..., "meta": {...}}

The sidecar is plain JSON text so a checkpoint can be inspected without
loading any array data. Loaders validate every array shape against the
configuration recorded in the sidecar before accepting the weights.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError

FORMAT_VERSION = 1


def save_arrays(path, arrays: dict, kind: str, meta: dict) -> None:
    """Write named arrays as float32 plus the JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    as_f32 = {}
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if not np.all(np.isfinite(arr)):
            raise ConfigurationError(f"array {name!r} contains non-finite values")
        as_f32[name] = arr.astype(np.float32)
    np.savez(path, **as_f32)
    saved = path if path.suffix == ".npz" else path.with_suffix(path.suffix + ".npz")
    if saved != path:
        saved.replace(path)  # np.savez appends .npz; keep the caller's name
    sidecar = {"format_version": FORMAT_VERSION, "kind": kind, "meta": meta}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_arrays(path) -> tuple[dict, str, dict]:
    """Read (arrays, kind, meta); validates the format version."""
    path = Path(path)
    sidecar_path = Path(str(path) + ".json")
    if not path.exists() or not sidecar_path.exists():
        raise DataError(f"checkpoint {path} or its .json sidecar is missing")
    sidecar = json.loads(sidecar_path.read_text())
    version = sidecar.get("format_version")
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint format_version {version!r}")
    with np.load(path) as npz:
        arrays = {name: npz[name] for name in npz.files}
    return arrays, sidecar.get("kind", ""), sidecar.get("meta", {})
