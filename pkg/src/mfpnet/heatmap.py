"""Grayscale PGM export for single-channel feature maps."""
from __future__ import annotations

import numpy as np

from .errors import FormatError, ShapeError


def to_gray(map2d) -> np.ndarray:
    """Per-map min-max scaling to 0..255; a constant map becomes mid-gray 128."""
    a = np.asarray(getattr(map2d, "data", map2d), dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"heatmap expects a 2-d map, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ShapeError("heatmap input contains non-finite values")
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.full(a.shape, 128, dtype=np.uint8)
    return np.rint((a - lo) / (hi - lo) * 255.0).astype(np.uint8)


def encode_pgm(gray: np.ndarray) -> bytes:
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(gray, dtype=np.uint8).tobytes()


def export_heatmap(map2d, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pgm(to_gray(map2d)))


def read_pgm(path) -> np.ndarray:
    """Parse a binary 8-bit PGM (comments allowed in the header)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("PGM header truncated", pos)
        tokens.append(buf[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary PGM: {tokens[0]!r}", 0)
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"only 8-bit PGM supported, maxval {maxval}", pos)
    pos += 1
    if len(buf) - pos != w * h:
        raise FormatError(f"PGM payload has {len(buf) - pos} bytes, expected {w * h}", pos)
    return np.frombuffer(buf, dtype=np.uint8, offset=pos).reshape(h, w).copy()
