"""Versioned little-endian tensor container.

Layout::

    offset  size  field
    0       8     magic b"GCILCKPT"
    8       4     format version, uint32 little-endian
    12      4     header length L in bytes, uint32 little-endian
    16      L     UTF-8 JSON header
    16+L    ...   data blob: tensors back to back, C order, little-endian

The JSON header has two keys. ``meta`` holds arbitrary JSON metadata and
``tensors`` is a list of ``{name, dtype, shape, offset, nbytes}`` records with
``offset`` relative to the start of the data blob. Dtypes are numpy
little-endian codes such as ``"<f8"``, ``"<f4"`` or ``"<i8"``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"GCILCKPT"
VERSION = 1
_ALLOWED = {"<f4", "<f8", "<i8", "<u1", "|u1", "<i4"}


class CheckpointError(ValueError):
    """Unreadable, truncated or incompatible checkpoint."""


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], meta: dict[str, Any]) -> None:
    records = []
    blobs = []
    offset = 0
    for name, array in tensors.items():
        arr = np.asarray(array)
        # ascontiguousarray alone promotes 0-d arrays to 1-d
        arr = np.ascontiguousarray(arr).reshape(arr.shape)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        if arr.dtype.str not in _ALLOWED:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = arr.tobytes()
        records.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": records}, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"{path}: no such checkpoint")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    version, header_len = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 16 + header_len:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(raw[16:16 + header_len].decode("utf-8"))
    base = 16 + header_len
    tensors = {}
    for rec in header["tensors"]:
        start = base + rec["offset"]
        end = start + rec["nbytes"]
        if end > len(raw):
            raise CheckpointError(f"{path}: tensor {rec['name']!r} runs past end of file")
        arr = np.frombuffer(raw[start:end], dtype=np.dtype(rec["dtype"]))
        tensors[rec["name"]] = arr.reshape(tuple(rec["shape"])).copy()
    return tensors, header["meta"]
