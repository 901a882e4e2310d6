"""The "SPLB" tensor container shared by host and SAE checkpoints.

Layout (all integers little-endian u32)::

    b"SPLB" | version | meta_len | meta JSON (UTF-8) | n_tensors |
    { name_len | name | rank | dims... | float32 payload }*
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"SPLB"
VERSION = 1


def dumps(meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError("checkpoint is truncated")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def loads(raw: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise FormatError("bad magic, not an SPLB checkpoint")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported SPLB version {version}")
    try:
        meta = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt metadata block: {exc}") from exc
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims)
        tensors[name] = arr.astype(np.float32)
    if r.pos != len(raw):
        raise FormatError("trailing bytes after last tensor")
    return meta, tensors


def save(path: str | Path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(meta, tensors))


def load(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())


def check_names(tensors: dict[str, np.ndarray], expected: set[str]) -> None:
    for name in tensors:
        if name not in expected:
            raise FormatError(f"unknown tensor name {name!r}")
    missing = sorted(expected - set(tensors))
    if missing:
        raise FormatError(f"missing tensors: {', '.join(missing)}")


def digest(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()
