"""Binary checkpoint files: named arrays plus a JSON metadata block.

Layout (all integers little-endian):

    magic   4 bytes  b"MCKP"
    version u32
    meta    u32 length + UTF-8 JSON
    count   u32 number of arrays
    per array:
        name  u16 length + UTF-8 bytes
        dtype u8 code (0=f4, 1=f8, 2=i8, 3=bool)
        ndim  u8
        dims  ndim * u32
        data  raw little-endian buffer
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

CHECKPOINT_MAGIC = b"MCKP"
CHECKPOINT_VERSION = 1

_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
    np.dtype("bool"): 3,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_checkpoint(path: str, arrays: dict, meta: dict = None) -> None:
    """Write arrays and metadata atomically (via a temp file + rename)."""
    meta_bytes = json.dumps(meta or {}).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            dtype = arr.dtype.newbyteorder("<")
            if dtype not in _DTYPE_CODES:
                raise ValueError(
                    f"array {name!r} has unsupported dtype {arr.dtype}")
            name_b = name.encode("utf-8")
            if len(name_b) > 0xFFFF:
                raise ValueError(f"array name too long: {name!r}")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<BB", _DTYPE_CODES[dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    os.replace(tmp, path)


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("truncated checkpoint file")
    return buf


def load_checkpoint(path: str):
    """Read a checkpoint; returns ``(arrays, meta)``."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path!r} is not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4))
        meta = json.loads(_read_exact(fh, meta_len).decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            code, ndim = struct.unpack("<BB", _read_exact(fh, 2))
            if code not in _CODE_DTYPES:
                raise ValueError(f"array {name!r} has unknown dtype code {code}")
            dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            dtype = _CODE_DTYPES[code]
            n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            buf = _read_exact(fh, n_bytes)
            arrays[name] = np.frombuffer(buf, dtype=dtype).reshape(dims).copy()
        return arrays, meta
