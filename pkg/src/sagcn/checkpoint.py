"""Versioned binary parameter dumps.

Layout (little-endian)::

    magic "SAGK" | u32 version | u32 meta_len | meta (UTF-8 JSON) | u32 count
    per tensor: u16 name_len | name | u32 ndim | u32 dims... | float64 values

Values are stored as raw float64, so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .numcore import Params, Tensor

MAGIC = b"SAGK"
VERSION = 1


def checkpoint_bytes(params: Params, meta: dict | None = None) -> bytes:
    meta_raw = json.dumps(meta or {}, sort_keys=True).encode()
    out = [MAGIC, struct.pack("<II", VERSION, len(meta_raw)), meta_raw, struct.pack("<I", len(params))]
    for name in sorted(params):
        data = np.ascontiguousarray(params[name].data, dtype="<f8")
        raw_name = name.encode()
        out.append(struct.pack("<H", len(raw_name)) + raw_name)
        out.append(struct.pack(f"<I{data.ndim}I", data.ndim, *data.shape))
        out.append(data.tobytes())
    return b"".join(out)


def save_checkpoint(path, params: Params, meta: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, meta))


def load_checkpoint(path) -> tuple[Params, dict]:
    raw = Path(path).read_bytes()
    try:
        if raw[:4] != MAGIC:
            raise FormatError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
        version, meta_len = struct.unpack_from("<II", raw, 4)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        off = 12
        meta = json.loads(raw[off:off + meta_len])
        off += meta_len
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        params: Params = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + name_len].decode()
            off += name_len
            (ndim,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            values = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape)
            off += 8 * size
            params[name] = Tensor(values.copy(), requires_grad=True, name=name)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from None
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return params, meta
