"""Binary PGM (P5) reading and writing, 8- or 16-bit."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import ParseError


def _header_tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    tokens, pos, n = [], 0, len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ParseError("PGM header truncated")
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def decode_pgm(buf: bytes) -> np.ndarray:
    """Return the raster as float64 in [0, 1] (value / maxval)."""
    tokens, pos = _header_tokens(buf, 4)
    if tokens[0] != b"P5":
        raise ParseError(f"not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ParseError("non-integer PGM header field") from exc
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ParseError(f"bad PGM dimensions {width}x{height} maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    need = width * height * dtype.itemsize
    raster = buf[pos:pos + need]
    if len(raster) != need:
        raise ParseError(f"PGM raster has {len(raster)} bytes, expected {need}")
    img = np.frombuffer(raster, dtype=dtype).reshape(height, width)
    return img.astype(np.float64) / maxval


def encode_pgm(image: np.ndarray, maxval: int = 65535) -> bytes:
    """Quantize an image in [0, 1] to ``maxval`` levels."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"PGM images are 2-D, got shape {image.shape}")
    q = np.rint(np.clip(image, 0.0, 1.0) * maxval)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    h, w = image.shape
    return f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + q.astype(dtype).tobytes()


def read_pgm(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


def write_pgm(path, image: np.ndarray, maxval: int = 65535) -> None:
    Path(path).write_bytes(encode_pgm(image, maxval))
