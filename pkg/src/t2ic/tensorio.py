"""Binary tensor container shared by datasets, checkpoints and feature dumps.

Layout (all integers little-endian)::

    b"T2IC"  magic
    u32      format version
    u32      tensor count
    per tensor:
        u16 name length, UTF-8 name
        u8  rank, rank x u32 dims
        raw f32 payload (row-major)
    u32      text field count
    per field:
        u16 key length, UTF-8 key
        u32 value length, UTF-8 value

Text fields carry header metadata (vocabulary, split sizes, provenance paths).
Names and fields are written in insertion order so identical inputs give
identical bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

MAGIC = b"T2IC"
VERSION = 1


class ContainerError(IOError):
    pass


class MagicMismatchError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class TruncatedFileError(ContainerError):
    pass


def _as_f32(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    return np.array(t, dtype="<f4", order="C")


def encode(tensors: Mapping[str, object], fields: Mapping[str, str] | None = None) -> bytes:
    fields = fields or {}
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = _as_f32(value)
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ContainerError(f"tensor name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    parts.append(struct.pack("<I", len(fields)))
    for key, value in fields.items():
        raw_key, raw_val = key.encode("utf-8"), str(value).encode("utf-8")
        parts.append(struct.pack("<H", len(raw_key)))
        parts.append(raw_key)
        parts.append(struct.pack("<I", len(raw_val)))
        parts.append(raw_val)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf, self.pos, self.source = buf, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"{self.source}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes, source: str = "<bytes>") -> tuple[dict[str, torch.Tensor], dict[str, str]]:
    r = _Reader(buf, source)
    if len(buf) < 4:
        raise TruncatedFileError(f"{source}: file too short for a header")
    if r.take(4) != MAGIC:
        raise MagicMismatchError(f"{source}: bad magic bytes, not a T2IC container")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionMismatchError(f"{source}: container version {version}, expected {VERSION}")
    (count,) = r.unpack("<I")
    tensors: dict[str, torch.Tensor] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims)
        tensors[name] = torch.from_numpy(arr.copy())
    (nfields,) = r.unpack("<I")
    fields: dict[str, str] = {}
    for _ in range(nfields):
        (klen,) = r.unpack("<H")
        key = r.take(klen).decode("utf-8")
        (vlen,) = r.unpack("<I")
        fields[key] = r.take(vlen).decode("utf-8")
    if r.pos != len(buf):
        raise ContainerError(f"{source}: {len(buf) - r.pos} trailing bytes after container")
    return tensors, fields


def save(path, tensors: Mapping[str, object], fields: Mapping[str, str] | None = None) -> Path:
    path = Path(path)
    data = encode(tensors, fields)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise ContainerError(f"cannot write {path}: {exc}") from exc
    return path


def load(path) -> tuple[dict[str, torch.Tensor], dict[str, str]]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise ContainerError(f"cannot read {path}: {exc}") from exc
    return decode(buf, str(path))
