"""Binary model checkpoints.

Layout (little-endian)::

    b"TTCK"  u32 version
    u32 meta_len, meta JSON  {"arch": ..., "provenance": ...}
    u32 count, then per tensor: u16 name_len, name (utf-8), u8 ndim, u32 dims..., float32 data
    u32 crc32 of everything before it

Loading parses and verifies the whole file before a model is built, so a
corrupt file never yields a partially populated model.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .diffgrad import Tensor
from .nets import ArchDescriptor, ModelBundle

MAGIC = b"TTCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(model: ModelBundle, provenance: dict | None = None) -> bytes:
    meta = json.dumps({"arch": model.arch.to_dict(), "provenance": provenance or {}}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(meta)), meta,
             struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        raw = name.encode()
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save(model: ModelBundle, path, provenance: dict | None = None) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(model, provenance))
    tmp.replace(path)


class _Reader:
    def __init__(self, blob: bytes, where: str):
        self.blob = blob
        self.off = 0
        self.where = where

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise CheckpointError(f"{self.where}: truncated at byte {self.off}")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(blob: bytes, where: str = "<bytes>") -> tuple[ModelBundle, dict]:
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{where}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 12:
        raise CheckpointError(f"{where}: truncated header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{where}: unsupported checkpoint version {version} (expected {VERSION})")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{where}: checksum mismatch (corrupt or truncated file)")
    r = _Reader(body, where)
    r.take(8)
    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode())
        arch = ArchDescriptor.from_dict(meta["arch"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{where}: unreadable metadata ({exc})") from exc
    (count,) = r.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        if name in arrays:
            raise CheckpointError(f"{where}: duplicate tensor name {name!r}")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(4 * size), "<f4").reshape(shape).astype(np.float32)
    if r.off != len(body):
        raise CheckpointError(f"{where}: {len(body) - r.off} trailing bytes")
    params = {k: Tensor(v, requires_grad=True, name=k, dtype=np.float32) for k, v in arrays.items()}
    return ModelBundle(arch, params), meta.get("provenance", {})


def load(path) -> tuple[ModelBundle, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return loads(path.read_bytes(), str(path))
