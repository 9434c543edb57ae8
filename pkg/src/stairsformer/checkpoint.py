"""Flat binary checkpoints: dotted parameter names -> float64 payloads.

Layout (all integers little-endian):
  bytes 0..12   magic b"STAIRSCKPT1\\n"
  bytes 12..20  uint64 header length H
  bytes 20..20+H  UTF-8 JSON: {name: {"shape": [...], "offset": int}},
                  names sorted, offsets in float64 elements into the payload
  remainder     concatenated C-order float64 little-endian buffers
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict

import numpy as np

from .tensor import Tensor

MAGIC = b"STAIRSCKPT1\n"


def save_checkpoint(path, params: Dict[str, Tensor]) -> None:
    entries = {}
    offset = 0
    names = sorted(params)
    for name in names:
        arr = params[name].data
        entries[name] = {"shape": list(arr.shape), "offset": offset}
        offset += arr.size
    header = json.dumps(entries, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for name in names:
            fh.write(np.ascontiguousarray(params[name].data, dtype="<f8").tobytes())


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    hlen = struct.unpack("<Q", raw[len(MAGIC): len(MAGIC) + 8])[0]
    start = len(MAGIC) + 8
    entries = json.loads(raw[start: start + hlen].decode("utf-8"))
    payload = np.frombuffer(raw[start + hlen:], dtype="<f8")
    out = {}
    for name, meta in entries.items():
        shape = tuple(meta["shape"])
        size = int(np.prod(shape)) if shape else 1
        off = meta["offset"]
        out[name] = payload[off: off + size].reshape(shape).astype(np.float64)
    return out


def restore_params(params: Dict[str, Tensor], loaded: Dict[str, np.ndarray]) -> None:
    """Copy loaded arrays into an existing parameter dict, by name."""
    missing = sorted(set(params) - set(loaded))
    extra = sorted(set(loaded) - set(params))
    if missing or extra:
        raise KeyError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
    for name, p in params.items():
        arr = loaded[name]
        if arr.shape != p.data.shape:
            raise ValueError(f"checkpoint {name}: shape {arr.shape} vs model {p.data.shape}")
        p.data[...] = arr
