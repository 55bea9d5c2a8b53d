"""MATN binary tensor files.

Layout (little-endian)::

    b"MATN" | u32 version (=1) | u32 rank | rank x u64 dims | u8 dtype | payload

dtype 0 is float32, 1 is float64; the payload is row-major.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"MATN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def dumps(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise FormatError(f"dtype: unsupported element type {arr.dtype}")
    head = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape) + struct.pack("<B", code)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def loads(buf: bytes) -> np.ndarray:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"{what}: truncated at byte {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("magic: expected b'MATN'")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise FormatError(f"version: unsupported value {version}")
    (rank,) = struct.unpack("<I", take(4, "rank"))
    if rank > 16:
        raise FormatError(f"rank: implausible value {rank}")
    dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dims"))
    (code,) = struct.unpack("<B", take(1, "dtype"))
    if code not in _DTYPES:
        raise FormatError(f"dtype: unknown code {code}")
    dt = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = take(count * dt.itemsize, "payload")
    if pos != len(buf):
        raise FormatError(f"payload: {len(buf) - pos} trailing bytes")
    return np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))


def save(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(dumps(arr))


def load(path: str | Path) -> np.ndarray:
    return loads(Path(path).read_bytes())
