"""``DTNS`` tensor files.

Layout (little-endian)::

    b"DTNS"  u8 version=1  u8 dtype  u8 rank  rank x u64 shape  payload

dtype codes: 0 f32, 1 f64, 2 u8, 3 i64.  The payload is the row-major
buffer, ``prod(shape) * itemsize`` bytes, with nothing after it.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..exceptions import DataIOError, FormatError
from ..tensor import Tensor

MAGIC = b"DTNS"
VERSION = 1
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2, np.dtype(np.int64): 3}
_DTYPES = {v: k for k, v in _CODES.items()}
HEADER_SIZE = 7


def encode_tensor(t) -> bytes:
    arr = np.asarray(t.data if isinstance(t, Tensor) else t, order="C")
    try:
        code = _CODES[arr.dtype]
    except KeyError:
        raise TypeError(f"unsupported dtype {arr.dtype}; expected f32, f64, u8 or i64") from None
    head = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < HEADER_SIZE:
        raise FormatError("truncated header", offset=len(buf))
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected b'DTNS'", offset=0)
    version, code, rank = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}", offset=5)
    shape_end = HEADER_SIZE + 8 * rank
    if len(buf) < shape_end:
        raise FormatError("truncated shape", offset=len(buf))
    shape = struct.unpack_from(f"<{rank}Q", buf, HEADER_SIZE)
    dt = _DTYPES[code]
    need = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    have = len(buf) - shape_end
    if have < need:
        raise FormatError(f"truncated payload: {have} of {need} bytes", offset=len(buf))
    if have > need:
        raise FormatError(f"{have - need} trailing bytes after payload", offset=shape_end + need)
    arr = np.frombuffer(buf, dtype=dt.newbyteorder("<"), count=need // dt.itemsize, offset=shape_end)
    return arr.astype(dt).reshape(shape)


def write_tensor(path, t):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_tensor(t))
    except OSError as e:
        raise DataIOError(f"cannot write tensor file {path}: {e}") from e


def read_tensor(path) -> Tensor:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise DataIOError(f"cannot read tensor file {path}: {e}") from e
    try:
        return Tensor(decode_tensor(buf))
    except FormatError as e:
        raise FormatError(f"{path}: {e}") from None
