"""Byte-deterministic array container: magic, JSON header, raw little-endian arrays."""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"LOCKIN-STORE-1\n"


def dumps(arrays: Mapping[str, np.ndarray], manifest: Mapping | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype = "<i8" if arr.dtype.kind in "iub" else "<f8"
        raw = np.ascontiguousarray(arr.astype(dtype)).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"manifest": dict(manifest or {}), "arrays": entries}, sort_keys=True).encode()
    return b"".join([MAGIC, struct.pack("<Q", len(header)), header, *chunks])


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if not data.startswith(MAGIC):
        raise ValueError("not a lockin store file")
    pos = len(MAGIC)
    (hlen,) = struct.unpack("<Q", data[pos:pos + 8])
    pos += 8
    header = json.loads(data[pos:pos + hlen])
    base = pos + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        arr = np.frombuffer(data[start:start + e["nbytes"]], dtype=e["dtype"]).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(np.int64 if e["dtype"] == "<i8" else np.float64)
    return arrays, header["manifest"]


def write(path, arrays: Mapping[str, np.ndarray], manifest: Mapping | None = None) -> str:
    """Write the container and return its sha256 digest."""
    data = dumps(arrays, manifest)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())


def digest(obj) -> str:
    """Stable short digest of a JSON-serializable object or raw bytes."""
    if not isinstance(obj, bytes):
        obj = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(obj).hexdigest()[:16]
