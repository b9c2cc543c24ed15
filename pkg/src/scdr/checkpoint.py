"""Binary checkpoints.

Layout (all little-endian)::

    b"SCDR"  u32 version
    u32 len, config hash (ascii hex)
    u32 epoch                 next epoch to run; plain SGD keeps no other state
    u32 count
    count × { u32 len, name (utf-8), u32 ndim, ndim × u32 dims, f32 data }
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"SCDR"
VERSION = 1


@dataclass
class Checkpoint:
    config_hash: str
    epoch: int
    arrays: dict[str, np.ndarray]


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def dumps(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), _pack_str(ckpt.config_hash),
             struct.pack("<II", ckpt.epoch, len(ckpt.arrays))]
    for name, arr in ckpt.arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def loads(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("not an SCDR checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config_hash = r.string()
    epoch, count = r.u32(), r.u32()
    arrays = {}
    for _ in range(count):
        name = r.string()
        ndim = r.u32()
        shape = tuple(struct.unpack(f"<{ndim}I", r.take(4 * ndim)))
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(config_hash, epoch, arrays)


def save(path, model, config_hash: str, epoch: int) -> Path:
    path = Path(path)
    ckpt = Checkpoint(config_hash, epoch, {k: v.data for k, v in model.named_parameters().items()})
    path.write_bytes(dumps(ckpt))
    return path


def read(path) -> Checkpoint:
    path = Path(path)
    try:
        return loads(path.read_bytes())
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc


def restore(model, ckpt: Checkpoint, expected_hash: str | None = None) -> None:
    """Copy checkpoint arrays into ``model`` in place."""
    if expected_hash is not None and ckpt.config_hash != expected_hash:
        raise CheckpointError(
            f"checkpoint was written under config {ckpt.config_hash[:12]}…, current config is {expected_hash[:12]}…"
        )
    params = model.named_parameters()
    if set(params) != set(ckpt.arrays):
        missing = sorted(set(params) ^ set(ckpt.arrays))
        raise CheckpointError(f"parameter names differ from model: {missing}")
    for name, p in params.items():
        arr = ckpt.arrays[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
        p.data = arr.astype(p.data.dtype).copy()
        p.grad = None
