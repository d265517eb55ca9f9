"""Flat binary checkpoint format.

Layout: magic ``GEMCKPT1`` | u32 little-endian manifest length | UTF-8 JSON
manifest | concatenated little-endian float32 payload. The manifest records
each array's name, shape, and byte offset into the payload plus a free-form
``meta`` dict. Round trips are bit-exact for float32 input.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from gemloc.diffcore.tensor import DiffcoreError

MAGIC = b"GEMCKPT1"


class CheckpointError(DiffcoreError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None):
    entries = []
    offset = 0
    blobs = []
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(np.ascontiguousarray(a).tobytes())
        offset += a.nbytes
    manifest = json.dumps({"arrays": entries, "meta": meta or {}},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"checkpoint {path}: bad magic {magic!r}")
        (mlen,) = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(mlen).decode("utf-8"))
        payload = f.read()
    arrays = {}
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        a = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        arrays[entry["name"]] = a.reshape(shape).astype(np.float32)
    return arrays, manifest.get("meta", {})
