"""DBTN tensor blob format.

Layout (all little-endian):
    magic   4 bytes  b"DBTN"
    version u32      1
    dtype   u8       0 = float32
    rank    u8
    dims    rank * u64
    payload prod(dims) * 4 bytes, row-major float32

Checkpoints, dataset directories and tree persistence all store raw arrays
in this format, so a saved artifact is byte-stable across runs.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DBTN"
VERSION = 1
DTYPE_F32 = 0


class BlobFormatError(ValueError):
    """Raised on malformed or unsupported DBTN blobs."""


def dumps(arr: np.ndarray) -> bytes:
    a = np.ascontiguousarray(arr, dtype=np.float32)
    header = MAGIC + struct.pack("<IBB", VERSION, DTYPE_F32, a.ndim)
    dims = struct.pack(f"<{a.ndim}Q", *a.shape) if a.ndim else b""
    return header + dims + a.tobytes()


def loads(data: bytes) -> np.ndarray:
    if data[:4] != MAGIC:
        raise BlobFormatError("bad magic; not a DBTN blob")
    version, dtype, rank = struct.unpack_from("<IBB", data, 4)
    if version != VERSION:
        raise BlobFormatError(f"unsupported DBTN version {version}")
    if dtype != DTYPE_F32:
        raise BlobFormatError(f"unsupported dtype code {dtype}")
    offset = 10
    dims = struct.unpack_from(f"<{rank}Q", data, offset) if rank else ()
    offset += 8 * rank
    count = int(np.prod(dims)) if rank else 1
    payload = data[offset : offset + 4 * count]
    if len(payload) != 4 * count:
        raise BlobFormatError("truncated DBTN payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def save(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(dumps(arr))


def load(path: str | Path) -> np.ndarray:
    return loads(Path(path).read_bytes())
