"""Versioned binary tensor container.

Layout (little-endian)::

    magic   4s   b"LPCK"
    version u32
    meta    u32 length + UTF-8 JSON (sorted keys)
    count   u32
    count x [name u16 length + UTF-8][dtype u8][ndim u8][ndim x u64 shape][raw data]

Writing the same ``(meta, tensors)`` twice yields identical bytes.
"""

from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"LPCK"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("<u4"), 4: np.dtype("<u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def dumps(meta: Mapping, tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        encoded = name.encode()
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<BB", _CODES[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return buf.getvalue()


def loads(raw: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        return _loads(raw)
    except (struct.error, KeyError, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None


def _loads(raw: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    view = memoryview(raw)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint")
    (version,) = struct.unpack_from("<I", view, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 8
    (n,) = struct.unpack_from("<I", view, pos)
    pos += 4
    meta = json.loads(bytes(view[pos : pos + n]))
    pos += n
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos : pos + n]).decode()
        pos += n
        code, ndim = struct.unpack_from("<BB", view, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}Q", view, pos)
        pos += 8 * ndim
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if pos + size > len(raw):
            raise CheckpointError(f"truncated data for {name!r}")
        arr = np.frombuffer(raw, dtype=dt, count=size // dt.itemsize, offset=pos).reshape(shape)
        tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
        pos += size
    if pos != len(raw):
        raise CheckpointError("trailing bytes after last tensor")
    return meta, tensors


def save(path: str | os.PathLike, meta: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(meta, tensors))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
