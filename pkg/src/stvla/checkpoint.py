"""Versioned binary checkpoints: header plus named float64 arrays.

Layout: magic, u32 version, u32 header length, JSON header (d_model, the
ordered parameter name/shape spec, and free-form metadata), then the raw
little-endian float64 array data in spec order. Loading validates the name
set and every shape before touching any tensor.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"STCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, params: dict, meta: dict | None = None) -> None:
    names = sorted(params)
    spec = [[n, list(params[n].data.shape)] for n in names]
    header = {
        "version": VERSION,
        "d_model": int(meta.get("d_model", 0)) if meta else 0,
        "params": spec,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(params[n].data.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict, dict]:
    """Returns (meta header, {name: float64 array})."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic in {path}")
    version, blob_len = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported")
    header = json.loads(raw[12:12 + blob_len].decode())
    off = 12 + blob_len
    arrays = {}
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
        arrays[name] = arr.reshape(shape).copy()
        off += 8 * count
    if off != len(raw):
        raise CheckpointError(f"trailing bytes in {path}")
    return header, arrays


def load_into(path: str | Path, params: dict) -> dict:
    """Load arrays into existing named tensors; name sets and shapes must match."""
    header, arrays = load_checkpoint(path)
    missing = sorted(set(params) - set(arrays))
    extra = sorted(set(arrays) - set(params))
    if missing or extra:
        raise CheckpointError(f"parameter set mismatch: missing {missing[:4]}, "
                              f"unexpected {extra[:4]}")
    for name, tensor in params.items():
        if tuple(arrays[name].shape) != tensor.data.shape:
            raise CheckpointError(f"shape mismatch for {name}: file "
                                  f"{arrays[name].shape} vs model {tensor.data.shape}")
    for name, tensor in params.items():
        tensor.data = arrays[name]
    return header
