"""In-memory volumes and the SVL1 on-disk format.

SVL1 layout, little-endian::

    b"SVL1" | u32 D, W, H | f32 sd, sw, sh | D*W*H f32 voxels (d-major)
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigError, FormatError

MAGIC = b"SVL1"
_HEADER = struct.Struct("<4s3I3f")
HEADER_SIZE = _HEADER.size
# Refuse anything past 2**31 voxels; a corrupt header should not trigger a giant allocation.
MAX_VOXELS = 2**31


@dataclass
class Volume:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (3.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float64)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ConfigError(f"volume must be a non-empty 3D grid, got shape {self.voxels.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ConfigError(f"voxel spacing must be three positive values, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def with_voxels(self, voxels: np.ndarray, spacing=None) -> Volume:
        return Volume(voxels, self.spacing if spacing is None else spacing)


def encode_volume(v: Volume) -> bytes:
    header = _HEADER.pack(MAGIC, *v.dims, *v.spacing)
    return header + np.ascontiguousarray(v.voxels, dtype="<f4").tobytes()


def decode_volume(buf: bytes) -> Volume:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}", offset=0)
    if len(buf) < HEADER_SIZE:
        raise FormatError(f"truncated header: {len(buf)} of {HEADER_SIZE} bytes", offset=len(buf))
    _, d, w, h, sd, sw, sh = _HEADER.unpack_from(buf)
    if min(d, w, h) < 1:
        raise FormatError(f"zero dimension in {(d, w, h)}", offset=4)
    n = d * w * h
    if n > MAX_VOXELS:
        raise FormatError(f"dims {(d, w, h)} overflow the {MAX_VOXELS}-voxel limit", offset=4)
    if min(sd, sw, sh) <= 0 or not np.isfinite([sd, sw, sh]).all():
        raise FormatError(f"invalid spacing {(sd, sw, sh)}", offset=16)
    payload = len(buf) - HEADER_SIZE
    if payload != 4 * n:
        raise FormatError(
            f"truncated payload: header declares {4 * n} voxel bytes, file has {payload}",
            offset=HEADER_SIZE + min(payload, 4 * n),
        )
    voxels = np.frombuffer(buf, dtype="<f4", count=n, offset=HEADER_SIZE).reshape(d, w, h)
    return Volume(voxels.astype(np.float64), (sd, sw, sh))


def write_volume(path, v: Volume) -> None:
    Path(path).write_bytes(encode_volume(v))


def read_volume(path) -> Volume:
    path = Path(path)
    try:
        return decode_volume(path.read_bytes())
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from exc
