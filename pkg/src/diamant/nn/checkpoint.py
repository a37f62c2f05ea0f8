"""``DMCK`` checkpoint files.

Layout (little-endian)::

    b"DMCK"  u8 version=1
    u32 header_len, header (UTF-8 JSON object)
    u32 record_count
    record_count x [u16 name_len, name, u8 dtype, u8 rank, rank x u64 shape, raw data]

The JSON header carries the architecture description and the list of
frozen (non-trainable) entry names.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..exceptions import DataIOError, FormatError
from ..tensor.core import DTYPES
from .params import ParamStore

MAGIC = b"DMCK"
VERSION = 1
DTYPE_CODES = {"f32": 0, "f64": 1, "u8": 2, "i64": 3}
CODE_DTYPES = {v: DTYPES[k] for k, v in DTYPE_CODES.items()}


def _dtype_code(arr: np.ndarray) -> int:
    for name, code in DTYPE_CODES.items():
        if arr.dtype == DTYPES[name]:
            return code
    raise TypeError(f"unsupported dtype {arr.dtype}")


def encode_checkpoint(store: ParamStore, header: dict | None = None) -> bytes:
    header = dict(header or {})
    header["frozen"] = [k for k in store.names() if not store.is_trainable(k)]
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<BI", VERSION, len(hbytes)), hbytes, struct.pack("<I", len(store))]
    for name, t in store.items():
        arr = np.ascontiguousarray(t.data)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", _dtype_code(arr), arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes):
    """Returns ``(store, header)``."""
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated checkpoint: need {n} bytes", offset=pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise FormatError("bad magic, expected b'DMCK'", offset=0)
    version, hlen = struct.unpack("<BI", take(5))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    try:
        header = json.loads(take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable header: {e}", offset=9) from None
    (count,) = struct.unpack("<I", take(4))
    frozen = set(header.get("frozen", []))
    store = None
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in CODE_DTYPES:
            raise FormatError(f"unknown dtype code {code}", offset=pos - 2)
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        dt = CODE_DTYPES[code]
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(n * dt.itemsize), dtype=dt.newbyteorder("<")).astype(dt).reshape(shape)
        if store is None:
            store = ParamStore(dt if dt.kind == "f" else np.float32)
        store.add(name, shape, trainable=name not in frozen)
        store.set(name, arr)
    if pos != len(buf):
        raise FormatError("trailing bytes after last record", offset=pos)
    return (store if store is not None else ParamStore()), header


def save_checkpoint(path, store: ParamStore, header: dict | None = None):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_checkpoint(store, header))
    except OSError as e:
        raise DataIOError(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path):
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise DataIOError(f"cannot read checkpoint {path}: {e}") from e
    return decode_checkpoint(buf)
