"""Binary PGM (P5, 8-bit) reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PGMError(ValueError):
    pass


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    toks: list[bytes] = []
    i = 0
    while len(toks) < count:
        if i >= len(data):
            raise PGMError("truncated PGM header")
        ch = data[i:i + 1]
        if ch == b"#":
            nl = data.find(b"\n", i)
            i = len(data) if nl < 0 else nl + 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j:j + 1].isspace() and data[j:j + 1] != b"#":
                j += 1
            toks.append(data[i:j])
            i = j
    # exactly one whitespace byte separates the header from the raster
    return toks, i + 1


def decode_pgm(data: bytes) -> np.ndarray:
    toks, offset = _tokens(data, 4)
    if toks[0] != b"P5":
        raise PGMError(f"unsupported PGM magic {toks[0]!r}; only binary P5 is handled")
    try:
        width, height, maxval = (int(t) for t in toks[1:])
    except ValueError as exc:
        raise PGMError("non-numeric PGM header field") from exc
    if maxval != 255:
        raise PGMError(f"only maxval 255 is supported, got {maxval}")
    raster = data[offset:offset + width * height]
    if len(raster) != width * height:
        raise PGMError(f"PGM raster truncated: {len(raster)} of {width * height} bytes")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width).copy()


def encode_pgm(pixels: np.ndarray) -> bytes:
    a = np.asarray(pixels)
    if a.ndim != 2:
        raise PGMError(f"PGM needs a 2-D grid, got shape {a.shape}")
    if a.dtype != np.uint8:
        if a.min(initial=0) < 0 or a.max(initial=0) > 255:
            raise PGMError("pixel values outside [0, 255]")
        a = a.astype(np.uint8)
    h, w = a.shape
    return b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(a).tobytes()


def read_pgm(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


def write_pgm(path, pixels: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(pixels))


def signed_to_pgm(values: np.ndarray) -> np.ndarray:
    """Visual rendering of a signed map: offset by +128 and clamp to 8 bits."""
    return np.clip(np.asarray(values, dtype=np.int32) + 128, 0, 255).astype(np.uint8)
