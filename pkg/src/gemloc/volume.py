"""Dense 3D scalar volumes and their on-disk format.

File layout: magic ``RVOL1`` | dims as 3 little-endian u32 (d, h, w) |
spacing as 3 little-endian f32 | row-major little-endian f32 payload.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from gemloc.errors import DataError

MAGIC = b"RVOL1"


@dataclass
class Volume:
    data: np.ndarray  # (d, h, w) float32
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise DataError(f"volume must be 3-D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3:
            raise DataError(f"spacing must have 3 entries, got {self.spacing}")

    @property
    def dims(self):
        return self.data.shape


def save_volume(path, vol: Volume):
    d, h, w = vol.dims
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<3I", d, h, w))
        f.write(struct.pack("<3f", *vol.spacing))
        f.write(np.ascontiguousarray(vol.data, dtype="<f4").tobytes())


def load_volume(path) -> Volume:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise DataError(f"{path}: bad volume magic {magic!r}")
        d, h, w = struct.unpack("<3I", f.read(12))
        spacing = struct.unpack("<3f", f.read(12))
        payload = f.read(d * h * w * 4)
    if len(payload) != d * h * w * 4:
        raise DataError(f"{path}: truncated payload, expected {d * h * w} voxels")
    data = np.frombuffer(payload, dtype="<f4").reshape(d, h, w).astype(np.float32)
    return Volume(data=data, spacing=spacing)
