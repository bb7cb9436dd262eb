"""Checkpoint files: one JSON header line, then raw little-endian float32 arrays.

The header holds free-form metadata plus a manifest of ``{name, shape,
offset, nbytes}`` entries; offsets count from the first byte after the
header's newline. Arrays are stored in manifest order.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

MAGIC = "denoise-lm-checkpoint/1"
_DTYPE = np.dtype("<f4")


def save(path, metadata: dict, arrays: dict[str, np.ndarray]) -> None:
    manifest, offset = [], 0
    blobs = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype=_DTYPE)
        manifest.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        offset += a.nbytes
        blobs.append(a.tobytes())
    header = json.dumps({"format": MAGIC, "metadata": metadata, "manifest": manifest}, sort_keys=True)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(header.encode("utf-8") + b"\n")
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl].decode("utf-8"))
    if header.get("format") != MAGIC:
        raise ValueError(f"{path} is not a checkpoint (format {header.get('format')!r})")
    body = memoryview(raw)[nl + 1 :]
    arrays = {}
    for entry in header["manifest"]:
        start = entry["offset"]
        a = np.frombuffer(body[start : start + entry["nbytes"]], dtype=_DTYPE)
        arrays[entry["name"]] = a.reshape(entry["shape"]).astype(np.float32)
    return header["metadata"], arrays
