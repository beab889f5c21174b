"""PCNT binary tensor format.

Layout (all integers little-endian)::

    b"PCNT" | version u16 | dtype u8 (0=f32, 1=f64) | rank u8 |
    rank x extent u64 | raw row-major scalars
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from pcnet.exceptions import CheckpointError

MAGIC = b"PCNT"
VERSION = 1
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {code: dt for dt, code in _CODES.items()}


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _CODES:
        raise CheckpointError(f"unsupported dtype {arr.dtype}; only float32/float64 are stored")
    head = MAGIC + struct.pack("<HBB", VERSION, _CODES[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def read_tensor(f: BinaryIO) -> np.ndarray:
    """Read one tensor from a binary stream positioned at its magic."""
    head = f.read(8)
    if len(head) < 8 or head[:4] != MAGIC:
        raise CheckpointError("not a PCNT tensor (bad magic or truncated header)")
    version, code, rank = struct.unpack("<HBB", head[4:])
    if version != VERSION:
        raise CheckpointError(f"unsupported PCNT version {version}")
    if code not in _DTYPES:
        raise CheckpointError(f"unknown dtype code {code}")
    raw = f.read(8 * rank)
    if len(raw) < 8 * rank:
        raise CheckpointError("truncated PCNT extents")
    shape = struct.unpack(f"<{rank}Q", raw)
    dt = _DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    payload = f.read(nbytes)
    if len(payload) < nbytes:
        raise CheckpointError(f"truncated PCNT payload: expected {nbytes} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def tensor_from_bytes(data: bytes) -> np.ndarray:
    buf = io.BytesIO(data)
    arr = read_tensor(buf)
    if buf.read(1):
        raise CheckpointError("trailing bytes after PCNT tensor")
    return arr


def save_tensor(arr: np.ndarray, path: str | Path) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def load_tensor(path: str | Path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read tensor file {path}: {exc.strerror}") from None
    return tensor_from_bytes(data)
