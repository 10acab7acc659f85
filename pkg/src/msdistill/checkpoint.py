"""Versioned binary checkpoints.

Layout (all integers little-endian ``u32``)::

    b"MSCK" | version | header length | header (UTF-8 JSON) | blob count |
    blobs: name length | name (UTF-8) | ndim | dims... | float32 LE data

Blobs are written in sorted name order, so equal contents give equal bytes.
Payloads are stored as float32; float32 arrays round-trip bit-exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"MSCK"
VERSION = 1
_U32 = struct.Struct("<I")


def _u32(value: int) -> bytes:
    return _U32.pack(value)


def encode_checkpoint(header: Mapping, blobs: Mapping[str, np.ndarray]) -> bytes:
    head = json.dumps(dict(header), sort_keys=True).encode("utf-8")
    parts = [MAGIC, _u32(VERSION), _u32(len(head)), head, _u32(len(blobs))]
    for name in sorted(blobs):
        arr = np.asarray(blobs[name])
        key = name.encode("utf-8")
        parts += [_u32(len(key)), key, _u32(arr.ndim)]
        parts += [_u32(d) for d in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(raw: bytes, source: str = "<bytes>") -> tuple[dict, dict[str, np.ndarray]]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"{source}: truncated checkpoint at byte {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    def u32() -> int:
        return _U32.unpack(take(4))[0]

    if take(4) != MAGIC:
        raise FormatError(f"{source}: not a checkpoint (bad magic)")
    version = u32()
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    try:
        header = json.loads(take(u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: corrupt checkpoint header ({exc})") from exc
    blobs: dict[str, np.ndarray] = {}
    for _ in range(u32()):
        name = take(u32()).decode("utf-8")
        shape = tuple(u32() for _ in range(u32()))
        count = int(np.prod(shape, dtype=np.int64))
        blobs[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(raw):
        raise FormatError(f"{source}: {len(raw) - pos} trailing bytes after the last blob")
    return header, blobs


def save_checkpoint(path, header: Mapping, blobs: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(header, blobs))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    return decode_checkpoint(path.read_bytes(), str(path))
