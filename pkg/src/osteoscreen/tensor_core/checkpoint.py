"""Binary checkpoint format for named float arrays.

Layout (all integers little-endian)::

    b"TSCK"
    u32  format version (1)
    u32  element type tag: 1 = float32, 2 = float64
    u32  number of arrays
    per array:
        u32  name length in bytes, then the UTF-8 name
        u32  rank, then rank x u64 dimensions
        raw little-endian float payload, row-major
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import CheckpointError

MAGIC = b"TSCK"
VERSION = 1
_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAG_OF = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


def encode(arrays: Mapping[str, np.ndarray]) -> bytes:
    dtypes = {np.asarray(a).dtype for a in arrays.values()}
    if len(dtypes) > 1:
        raise CheckpointError(f"mixed element types {sorted(map(str, dtypes))}")
    dtype = dtypes.pop() if dtypes else np.dtype(np.float32)
    if dtype not in _TAG_OF:
        raise CheckpointError(f"unsupported element type {dtype}")
    tag = _TAG_OF[dtype]
    out = [MAGIC, struct.pack("<III", VERSION, tag, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_TAGS[tag]).tobytes())
    return b"".join(out)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError("checkpoint truncated")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, tag, count = struct.unpack("<III", take(12))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if tag not in _TAGS:
        raise CheckpointError(f"unknown element type tag {tag}")
    dtype = _TAGS[tag]
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("array name is not valid UTF-8") from exc
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(n * dtype.itemsize), dtype=dtype).reshape(dims)
        if name in arrays:
            raise CheckpointError(f"duplicate array name {name!r}")
        arrays[name] = data.astype(dtype.newbyteorder("="))
    if pos != len(buf):
        raise CheckpointError("trailing bytes after last array")
    return arrays


def save(path, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(arrays))


def load(path) -> dict[str, np.ndarray]:
    try:
        return decode(Path(path).read_bytes())
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
