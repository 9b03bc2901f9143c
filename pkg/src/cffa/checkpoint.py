"""Binary checkpoint container of named float64 tensors.

Layout (all integers u32 little-endian, values f64 little-endian)::

    b"CFFA" | version | tensor count
    per tensor: name length | name (utf-8) | rank | dims... | values...

Text payloads (config snapshot, RNG state) are stored as rank-1 tensors of
byte values under names starting with ``__``, after all numeric tensors.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CFFA"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def decode_text(values: np.ndarray) -> str:
    return bytes(np.asarray(values, dtype=np.uint8).tolist()).decode("utf-8")


def to_bytes(tensors: dict[str, np.ndarray], version: int = VERSION) -> bytes:
    parts = [MAGIC, struct.pack("<II", version, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def from_bytes(raw: bytes) -> dict[str, np.ndarray]:
    view = memoryview(raw)
    pos = 0

    def read(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(read(4)) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, count = struct.unpack("<II", read(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", read(4))
        try:
            name = bytes(read(name_len)).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("corrupted tensor name") from None
        (rank,) = struct.unpack("<I", read(4))
        if rank > 8:
            raise CheckpointError(f"{name}: implausible rank {rank}")
        dims = struct.unpack(f"<{rank}I", read(4 * rank))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        values = np.frombuffer(read(8 * size), dtype="<f8").astype(np.float64).reshape(dims)
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r}")
        tensors[name] = values
    if pos != len(view):
        raise CheckpointError("trailing bytes after the last tensor")
    return tensors


def save(tensors: dict[str, np.ndarray], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(tensors))
    os.replace(tmp, path)
    return path


def load(path) -> dict[str, np.ndarray]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from None
    return from_bytes(raw)


def diff(a: dict[str, np.ndarray], b: dict[str, np.ndarray]) -> list[str]:
    """Names whose stored bytes differ (including tensors present on one side only)."""
    names = list(a) + [n for n in b if n not in a]
    changed = []
    for name in names:
        if name not in a or name not in b:
            changed.append(name)
            continue
        x = np.asarray(a[name], dtype="<f8")
        y = np.asarray(b[name], dtype="<f8")
        if x.shape != y.shape or x.tobytes() != y.tobytes():
            changed.append(name)
    return changed
