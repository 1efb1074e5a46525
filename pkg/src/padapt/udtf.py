"""UDTF: a minimal binary container for dense float tensors.

Layout (all integers little-endian):

    magic   4 bytes  b"UDTF"
    version u8       0x01
    dtype   u8       0x01 = float64, 0x02 = float32
    rank    u8
    dims    rank x u32
    payload row-major little-endian floats

Used standalone for dataset clips and embedded as blocks inside padding and
checkpoint files.
"""

from __future__ import annotations

import io
import struct
from typing import BinaryIO

import numpy as np

from .errors import FormatError

MAGIC = b"UDTF"
VERSION = 1

_DTYPE_CODES = {np.dtype("<f8"): 1, np.dtype("<f4"): 2}
_CODE_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<f4")}

MAX_RANK = 8


def write_udtf_stream(f: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if not arr.flags.c_contiguous:
        # note: ascontiguousarray would silently promote 0-d to 1-d
        arr = np.ascontiguousarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise FormatError(f"UDTF supports float32/float64 only, got {arr.dtype}")
    if arr.ndim > MAX_RANK:
        raise FormatError(f"UDTF rank limit is {MAX_RANK}, got {arr.ndim}")
    f.write(MAGIC)
    f.write(struct.pack("<BBB", VERSION, _DTYPE_CODES[dt], arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<I", d))
    f.write(arr.astype(dt, copy=False).tobytes(order="C"))


def read_udtf_stream(f: BinaryIO) -> np.ndarray:
    head = f.read(7)
    if len(head) != 7:
        raise FormatError("UDTF: truncated header")
    if head[:4] != MAGIC:
        raise FormatError(f"UDTF: bad magic {head[:4]!r}")
    version, dtype_code, rank = struct.unpack("<BBB", head[4:])
    if version != VERSION:
        raise FormatError(f"UDTF: unsupported version {version}")
    if dtype_code not in _CODE_DTYPES:
        raise FormatError(f"UDTF: unknown dtype code {dtype_code}")
    if rank > MAX_RANK:
        raise FormatError(f"UDTF: rank {rank} exceeds limit {MAX_RANK}")
    raw_dims = f.read(4 * rank)
    if len(raw_dims) != 4 * rank:
        raise FormatError("UDTF: truncated dims")
    dims = struct.unpack(f"<{rank}I", raw_dims) if rank else ()
    dtype = _CODE_DTYPES[dtype_code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = f.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise FormatError("UDTF: truncated payload")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def udtf_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_udtf_stream(buf, arr)
    return buf.getvalue()


def write_udtf(path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_udtf_stream(f, arr)


def read_udtf(path) -> np.ndarray:
    with open(path, "rb") as f:
        arr = read_udtf_stream(f)
        if f.read(1):
            raise FormatError("UDTF: trailing bytes after payload")
    return arr
