"""Portable parameter files: a JSON header followed by little-endian float64 data.

Layout::

    b"SLCKPT01" | uint64 LE header length | UTF-8 JSON header | raw <f8 arrays

The header lists every array's name, shape and byte offset into the data block.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SLCKPT01"


class CheckpointError(ValueError):
    pass


def save_arrays(path: str | Path, kind: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        blob = arr.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"format": 1, "kind": kind, "meta": meta or {}, "arrays": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_arrays(path: str | Path) -> tuple[str, dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode())
    data = raw[16 + hlen :]
    arrays = {}
    for e in header["arrays"]:
        chunk = data[e["offset"] : e["offset"] + e["nbytes"]]
        expected = int(np.prod(e["shape"], dtype=np.int64)) * 8
        if len(chunk) != expected:
            raise CheckpointError(f"{path}: array {e['name']!r} truncated")
        arrays[e["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return header["kind"], arrays, header["meta"]
