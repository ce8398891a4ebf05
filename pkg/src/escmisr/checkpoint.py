"""Versioned little-endian binary checkpoints.

Layout::

    b"ESCM" | u32 version | u32 meta_len | meta (UTF-8 JSON) | u32 count |
    count x ( u32 name_len | name | u32 rank | rank x u32 dim | float32 payload )
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ESCM"
VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointError(IOError):
    """A checkpoint could not be written or parsed."""


def encode(meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(blob)), blob, _U32.pack(len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    def u32() -> int:
        return _U32.unpack(take(4))[0]

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version = u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(bytes(take(u32())).decode("utf-8"))
    tensors = {}
    for _ in range(u32()):
        name = bytes(take(u32())).decode("utf-8")
        shape = tuple(u32() for _ in range(u32()))
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).copy()
    if pos != len(view):
        raise CheckpointError("trailing bytes after last tensor")
    return meta, tensors


def save(path, meta: dict, tensors: dict[str, np.ndarray]) -> Path:
    """Write atomically (temp file then rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(encode(meta, tensors))
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"could not write {path}: {exc}") from exc
    return path


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"could not read {path}: {exc}") from exc
    return decode(data)
