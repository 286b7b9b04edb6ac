"""Binary tensor records.

Layout (little-endian): rank as u32, each dim as u32, dtype tag as u8
(0 = float32, 1 = float64), then the raw row-major data.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def tensor_bytes(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype not in _TAGS:
        raise TypeError(f"unsupported dtype {array.dtype}; only float32/float64 are serializable")
    header = struct.pack("<I", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape)
    header += struct.pack("<B", _TAGS[array.dtype])
    return header + np.ascontiguousarray(array, dtype=_DTYPES[_TAGS[array.dtype]]).tobytes()


def write_tensor(fp: BinaryIO, array: np.ndarray) -> int:
    blob = tensor_bytes(array)
    fp.write(blob)
    return len(blob)


def read_tensor(fp: BinaryIO) -> np.ndarray:
    raw = fp.read(4)
    if len(raw) != 4:
        raise EOFError("truncated tensor header")
    (rank,) = struct.unpack("<I", raw)
    dims = struct.unpack(f"<{rank}I", fp.read(4 * rank)) if rank else ()
    (tag,) = struct.unpack("<B", fp.read(1))
    if tag not in _DTYPES:
        raise ValueError(f"unknown dtype tag {tag}")
    dtype = _DTYPES[tag]
    count = int(np.prod(dims)) if dims else 1
    data = fp.read(count * dtype.itemsize)
    if len(data) != count * dtype.itemsize:
        raise EOFError("truncated tensor payload")
    return np.frombuffer(data, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
