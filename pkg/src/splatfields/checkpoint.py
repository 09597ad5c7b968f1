"""Flat binary container for named tensors with a JSON metadata block.

Layout: magic 'SFCK', u32 version, u32 meta length + UTF-8 JSON, u32 tensor
count, then per tensor: u16 name length + name, u8 dtype code, u8 ndim,
i64 dims, raw little-endian data. Entries are written in sorted-name order
so identical contents produce identical bytes.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"SFCK"
VERSION = 1

_DTYPE_CODES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "u1"}
_CODE_FOR = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2, np.dtype("u1"): 3}


def save_tensors(path, tensors: dict, meta: dict | None = None) -> None:
    """Write named arrays plus metadata, atomically."""
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            a = np.ascontiguousarray(tensors[name])
            if a.dtype not in _CODE_FOR:
                a = a.astype(np.float32)
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", _CODE_FOR[a.dtype], a.ndim))
            f.write(struct.pack(f"<{a.ndim}q", *a.shape))
            f.write(a.tobytes())
    os.replace(tmp, path)


def load_tensors(path) -> tuple[dict, dict]:
    """Read back (tensors, meta)."""
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise FormatError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(meta_len).decode("utf-8"))
        (count,) = struct.unpack("<I", f.read(4))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            code, ndim = struct.unpack("<BB", f.read(2))
            if code not in _DTYPE_CODES:
                raise FormatError(f"{path}: unknown dtype code {code}")
            shape = struct.unpack(f"<{ndim}q", f.read(8 * ndim))
            dtype = np.dtype(_DTYPE_CODES[code])
            size = int(np.prod(shape)) if ndim else 1
            buf = f.read(size * dtype.itemsize)
            if len(buf) != size * dtype.itemsize:
                raise FormatError(f"{path}: truncated tensor '{name}'")
            tensors[name] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    return tensors, meta
