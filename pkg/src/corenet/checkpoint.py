"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"CORN" | u32 version | u32 entry count
    entry: u32 name length | name (utf-8) | u32 rank | rank x u64 dims
           | u8 dtype tag | u64 payload length | payload (raw little-endian)

The first entry, ``__meta__``, carries a UTF-8 JSON document (dtype tag u8).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import FormatError

MAGIC = b"CORN"
VERSION = 1
META = "__meta__"

_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1"), 4: np.dtype("<i8")}
_TAGS = {dt: tag for tag, dt in _DTYPES.items()}


@dataclass
class Checkpoint:
    meta: dict = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def _entry(name: str, arr: np.ndarray) -> bytes:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    tag = _TAGS.get(np.dtype(dt))
    if tag is None:
        raise TypeError(f"unsupported dtype {arr.dtype} for entry {name!r}")
    raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
    name_b = name.encode("utf-8")
    head = struct.pack("<I", len(name_b)) + name_b + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + struct.pack("<BQ", tag, len(raw)) + raw


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(ckpt.tensors) + 1)]
    parts.append(_entry(META, np.frombuffer(meta, dtype=np.uint8)))
    for name, arr in ckpt.tensors.items():
        parts.append(_entry(name, np.asarray(arr)))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise FormatError(f"checkpoint version {version} is not supported (expected {VERSION})")
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}Q")
        tag, length = r.unpack("<BQ")
        if tag not in _DTYPES:
            raise FormatError(f"unknown dtype tag {tag} in entry {name!r}")
        dt = _DTYPES[tag]
        if length != int(np.prod(dims, dtype=np.int64)) * dt.itemsize:
            raise FormatError(f"payload size of {name!r} disagrees with its dims")
        entries[name] = np.frombuffer(r.take(length), dtype=dt).reshape(dims).copy()
    if r.pos != len(buf):
        raise FormatError("trailing bytes after last checkpoint entry")
    meta_raw = entries.pop(META, None)
    meta = json.loads(meta_raw.tobytes().decode("utf-8")) if meta_raw is not None else {}
    return Checkpoint(meta, entries)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
