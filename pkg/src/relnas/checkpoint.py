"""Versioned binary checkpoint: named tensors plus a JSON meta block.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header
(tensor names, dtypes, shapes, offsets, and arbitrary meta), then the raw
little-endian tensor payloads back to back.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = b"RELNAS01"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = le.tobytes()
        entries.append({
            "name": name,
            "dtype": le.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"version": 1, "meta": meta or {}, "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}")
    header_len = int.from_bytes(raw[8:16], "little")
    header = json.loads(raw[16:16 + header_len].decode("utf-8"))
    if header.get("version") != 1:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    base = 16 + header_len
    tensors: dict[str, np.ndarray] = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        buf = raw[start:start + e["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return tensors, header["meta"]
