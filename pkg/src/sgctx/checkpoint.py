"""Versioned parameter container.

Layout: 8-byte magic "SGCTXCK1", little-endian uint64 header length, UTF-8
JSON header, then raw little-endian float64 blobs.  The header maps tensor
names to shapes and byte offsets (relative to the blob section) and carries
an arbitrary JSON ``meta`` object, so any language can read the file back.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SGCTXCK1"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None):
    header_tensors = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        header_tensors[name] = {
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": arr.nbytes,
        }
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps(
        {"version": 1, "tensors": header_tensors, "meta": meta or {}},
        sort_keys=True,
    ).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        if header.get("version") != 1:
            raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
        blob = f.read()
    tensors = {}
    for name, info in header["tensors"].items():
        off, nbytes = info["offset"], info["nbytes"]
        arr = np.frombuffer(blob[off : off + nbytes], dtype="<f8")
        tensors[name] = arr.reshape(info["shape"]).astype(np.float64)
    return tensors, header["meta"]
