"""Single-file checkpoint: magic, JSON header, little-endian float32 arrays.

Layout::

    b"AVDETCKP" | uint32 version | uint64 header length | header JSON | data

The header lists every array with its name, shape and byte offset into the
data block, plus free-form metadata (hyper-parameters, seed, channel count).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"AVDETCKP"
VERSION = 1


def save_checkpoint(path, arrays: dict, meta: dict):
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(np.asarray(arrays[name], dtype="<f4"))
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"arrays": entries, "meta": meta}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    return Path(path)


def load_checkpoint(path):
    """Return ``(arrays, meta)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + hlen])
    base = 20 + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        arrays[e["name"]] = np.frombuffer(raw[start:start + e["nbytes"]], dtype="<f4").reshape(e["shape"]).copy()
    return arrays, header["meta"]
