"""Binary checkpoint files.

Layout (all integers u32 little-endian)::

    b"DPNT" | version | 32-byte config digest | entry count
    per entry: name length | UTF-8 name | rank | extents... | float32 LE data

Entries are written in sorted name order so equal contents give equal bytes.
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointError

MAGIC = b"DPNT"
VERSION = 1
DIGEST_BYTES = 32
_U32 = struct.Struct("<I")


@dataclass
class Checkpoint:
    version: int
    digest: bytes
    entries: dict[str, np.ndarray]


def to_disk_precision(arr: np.ndarray) -> np.ndarray:
    return np.asarray(arr, dtype="<f4")


def encode_checkpoint(entries: Mapping[str, np.ndarray], digest: bytes) -> bytes:
    if len(digest) != DIGEST_BYTES:
        raise CheckpointError(f"config digest must be {DIGEST_BYTES} bytes, got {len(digest)}")
    parts = [MAGIC, _U32.pack(VERSION), digest, _U32.pack(len(entries))]
    for name in sorted(entries):
        arr = to_disk_precision(entries[name])
        raw = name.encode("utf-8")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    """Write to a temporary sibling, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, entries: Mapping[str, np.ndarray], digest: bytes) -> None:
    atomic_write(path, encode_checkpoint(entries, digest))


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data, self.pos, self.source = data, 0, source

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.source}: truncated while reading {what}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    r = _Reader(data, source)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic bytes)")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version} (expected {VERSION})")
    digest = r.take(DIGEST_BYTES, "config digest")
    count = r.u32("entry count")
    entries: dict[str, np.ndarray] = {}
    for i in range(count):
        name_len = r.u32(f"entry {i} name length")
        try:
            name = r.take(name_len, f"entry {i} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{source}: entry {i} name is not valid UTF-8") from exc
        rank = r.u32(f"rank of {name!r}")
        shape = tuple(r.u32(f"extent of {name!r}") for _ in range(rank))
        size = int(np.prod(shape, dtype=np.int64))
        raw = r.take(4 * size, f"data of {name!r}")
        entries[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if r.pos != len(data):
        raise CheckpointError(f"{source}: {len(data) - r.pos} unexpected trailing bytes")
    return Checkpoint(version, digest, entries)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(data, str(path))


def check_shapes(entries: Mapping[str, np.ndarray], expected: Mapping[str, tuple[int, ...]]) -> None:
    """Raise naming the first parameter that is missing or has the wrong shape."""
    for name, shape in expected.items():
        if name not in entries:
            raise CheckpointError(f"checkpoint lacks parameter {name!r}")
        got = tuple(entries[name].shape)
        if got != tuple(shape):
            raise CheckpointError(f"parameter {name!r}: checkpoint shape {got} does not match configured shape {tuple(shape)}")
