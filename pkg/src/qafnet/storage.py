"""Deterministic binary container used for dataset and trajectory files.

Layout::

    b"QAFNET\\n"
    one line of JSON: {"kind", "version", "header": {...},
                       "arrays": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    raw little-endian array bytes, concatenated in directory order

Nothing time- or host-dependent is written, so equal inputs give equal bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ArtifactError

MAGIC = b"QAFNET\n"
VERSION = 1
_DTYPES = {"f8": "<f8", "i8": "<i8"}


def write_container(path, kind: str, header: dict, arrays: dict) -> None:
    directory, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = "f8" if arr.dtype.kind == "f" else "i8"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        directory.append({"name": name, "dtype": code, "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    meta = {"kind": kind, "version": VERSION, "header": header, "arrays": directory}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(meta, sort_keys=True, separators=(",", ":")).encode() + b"\n")
        for raw in blobs:
            fh.write(raw)


def read_container(path, kind: str):
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise ArtifactError(f"file not found: {path}") from None
    if not blob.startswith(MAGIC):
        raise ArtifactError(f"{path} is not a qafnet container")
    end = blob.index(b"\n", len(MAGIC))
    meta = json.loads(blob[len(MAGIC):end])
    if meta.get("kind") != kind or meta.get("version") != VERSION:
        raise ArtifactError(f"{path}: expected {kind} v{VERSION}, found "
                            f"{meta.get('kind')} v{meta.get('version')}")
    body = memoryview(blob)[end + 1:]
    arrays = {}
    for entry in meta["arrays"]:
        raw = body[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]) \
            .reshape(entry["shape"]).astype(np.float64 if entry["dtype"] == "f8" else np.int64)
    return meta["header"], arrays
