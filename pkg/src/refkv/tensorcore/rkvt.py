"""RKVT binary tensor files.

Layout: ``b"RKVT"``, u8 version (1), u8 dtype (0 = f32), u8 rank, u8 reserved,
rank x u64 little-endian extents, then the row-major little-endian payload.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"RKVT"
VERSION = 1
DTYPE_F32 = 0


class RkvtError(ValueError):
    pass


def dumps(array) -> bytes:
    arr = np.asarray(array, dtype="<f4")
    arr = np.ascontiguousarray(arr).reshape(arr.shape)  # keeps rank 0
    if arr.ndim > 255:
        raise RkvtError(f"rank {arr.ndim} does not fit in a u8")
    head = MAGIC + struct.pack("<BBBB", VERSION, DTYPE_F32, arr.ndim, 0)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def loads(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise RkvtError("bad magic, not an RKVT file")
    version, dtype, rank, _ = struct.unpack_from("<BBBB", buf, 4)
    if version != VERSION:
        raise RkvtError(f"unsupported RKVT version {version}")
    if dtype != DTYPE_F32:
        raise RkvtError(f"unsupported dtype code {dtype}")
    off = 8 + 8 * rank
    if len(buf) < off:
        raise RkvtError("truncated header")
    shape = struct.unpack_from(f"<{rank}Q", buf, 8)
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(buf) != off + 4 * count:
        raise RkvtError(f"payload has {len(buf) - off} bytes, expected {4 * count}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).astype(np.float32).reshape(shape)


def save(path, array):
    Path(path).write_bytes(dumps(array))


def load(path) -> np.ndarray:
    return loads(Path(path).read_bytes())
