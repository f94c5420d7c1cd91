"""Flat binary tensor format ``GTEN``.

Layout (little-endian): magic ``b"GTEN"``, version u32, dtype code u8
(0 = float64), rank u32, one u64 per extent, then the row-major payload.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Tuple, Union

import numpy as np

from .errors import DataError, DecodeError, VersionError
from .tensor import Tensor

MAGIC = b"GTEN"
VERSION = 1
DTYPE_F64 = 0


def encode_tensor(array) -> bytes:
    # np.asarray keeps rank 0; ascontiguousarray would promote scalars to rank 1
    arr = np.asarray(array.data if isinstance(array, Tensor) else array, dtype="<f8")
    header = MAGIC + struct.pack("<IBI", VERSION, DTYPE_F64, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_tensor(buf: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns ``(array, next_offset)``."""
    try:
        if buf[offset : offset + 4] != MAGIC:
            raise DecodeError("bad GTEN magic")
        version, dtype, rank = struct.unpack_from("<IBI", buf, offset + 4)
        if version != VERSION:
            raise VersionError(f"unsupported GTEN version {version}")
        if dtype != DTYPE_F64:
            raise DecodeError(f"unsupported GTEN dtype code {dtype}")
        pos = offset + 4 + 9
        shape = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        end = pos + 8 * count
        if end > len(buf):
            raise DecodeError("GTEN payload truncated")
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape)
    except struct.error as exc:
        raise DecodeError(f"GTEN header truncated: {exc}") from exc
    return arr, end


def save_tensor(array, path: Union[str, Path]) -> None:
    Path(path).write_bytes(encode_tensor(array))


def load_tensor(path: Union[str, Path]) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise DataError(f"{path}: {len(buf) - end} trailing bytes after tensor")
    return arr
