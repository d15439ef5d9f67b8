"""SegVol: a minimal little-endian container for one image or label volume.

Layout::

    offset  size  field
    0       4     magic b"SVOL"
    4       2     version (u16)
    6       12    dims D, H, W (3 x u32)
    18      12    spacing in mm (3 x f32)
    30      1     dtype code: 0 = f32 image, 1 = u8 labels
    31      ...   row-major payload, D*H*W elements
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError

MAGIC = b"SVOL"
VERSION = 1
_HEADER = struct.Struct("<4sH3I3fB")
HEADER_SIZE = _HEADER.size
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}


@dataclass
class SegVol:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def dtype_code(self) -> int:
        return 1 if self.data.dtype == np.uint8 else 0


def encode_segvol(vol: SegVol) -> bytes:
    data = np.asarray(vol.data)
    if data.ndim != 3:
        raise ConfigError(f"SegVol payload must be 3-d, got shape {data.shape}")
    if data.dtype == np.uint8:
        code = 1
    elif data.dtype in (np.float32, np.float64):
        code = 0
    else:
        raise ConfigError(f"SegVol stores float32 images or uint8 labels, not {data.dtype}")
    header = _HEADER.pack(MAGIC, VERSION, *data.shape, *(float(s) for s in vol.spacing), code)
    return header + np.ascontiguousarray(data, dtype=DTYPES[code]).tobytes()


def decode_segvol(buf: bytes) -> SegVol:
    if len(buf) < HEADER_SIZE:
        raise FormatError(f"header truncated: {len(buf)} of {HEADER_SIZE} bytes", len(buf))
    magic, version, d, h, w, sd, sh, sw, code = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if code not in DTYPES:
        raise FormatError(f"unknown dtype code {code}", 30)
    dtype = DTYPES[code]
    expected = d * h * w * dtype.itemsize
    got = len(buf) - HEADER_SIZE
    if got < expected:
        raise FormatError(f"payload truncated: {got} of {expected} bytes", len(buf))
    if got > expected:
        raise FormatError(f"{got - expected} trailing bytes after payload", HEADER_SIZE + expected)
    data = np.frombuffer(buf, dtype=dtype, offset=HEADER_SIZE, count=d * h * w).reshape(d, h, w)
    native = np.float32 if code == 0 else np.uint8
    return SegVol(data.astype(native), (sd, sh, sw))


def write_segvol(path: str | os.PathLike, vol: SegVol) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_segvol(vol))


def read_segvol(path: str | os.PathLike) -> SegVol:
    with open(path, "rb") as fh:
        return decode_segvol(fh.read())


def io_segvol(path, direction: str, payload: SegVol | None = None):
    """``read`` returns a SegVol; ``write`` stores ``payload`` and returns None."""
    if direction == "read":
        return read_segvol(path)
    if direction == "write":
        if payload is None:
            raise ConfigError("write needs a payload")
        write_segvol(path, payload)
        return None
    raise ConfigError(f"direction must be 'read' or 'write', got {direction!r}")
