"""Binary tensor container used for checkpoints and probability maps.

Layout (all integers unsigned 32-bit little-endian)::

    b"DDCM" | version | entry count |
    per entry: name length | UTF-8 name | ndim | dims... | float32 LE payload

Text blobs (the network config, training counters) are stored as 1-D
entries holding one byte value per element.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"DDCM"
VERSION = 1


class TensorFileError(IOError):
    """Malformed, truncated or incompatible tensor file."""


def _u32(value: int) -> bytes:
    return struct.pack("<I", value)


def encode_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def decode_text(arr: np.ndarray) -> str:
    return bytes(arr.astype(np.uint8).tolist()).decode("utf-8")


def dumps(entries: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, _u32(VERSION), _u32(len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts += [_u32(len(raw)), raw, _u32(arr.ndim)]
        parts += [_u32(d) for d in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise TensorFileError(f"corrupt tensor file: truncated at byte {pos} (need {n} more)")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    def u32() -> int:
        return struct.unpack("<I", take(4))[0]

    if bytes(take(4)) != MAGIC:
        raise TensorFileError("corrupt tensor file: bad magic bytes")
    version = u32()
    if version != VERSION:
        raise TensorFileError(f"unsupported tensor file version {version} (expected {VERSION})")
    out: dict[str, np.ndarray] = {}
    for _ in range(u32()):
        try:
            name = bytes(take(u32())).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise TensorFileError("corrupt tensor file: entry name is not UTF-8") from exc
        dims = tuple(u32() for _ in range(u32()))
        count = int(np.prod(dims, dtype=np.int64))
        payload = take(4 * count)
        out[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    if pos != len(view):
        raise TensorFileError(f"corrupt tensor file: {len(view) - pos} trailing bytes")
    return out


def save(path, entries: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(entries))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
