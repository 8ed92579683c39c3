"""Binary checkpoint reader/writer.

Layout (little endian)::

    b"SAIMCKPT" | version u32 | tensor count u32
    per tensor: name length u16 | UTF-8 name | ndim u8 | dims u32 * ndim | f32 payload
    metadata length u32 | UTF-8 JSON metadata

Tensor names follow the module paths (``enc.0.attn.qkv.weight``); optimizer
moments are stored as ``opt.m.<name>`` / ``opt.v.<name>``. Metadata carries the
model/training config, the step counter and RNG state.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SAIMCKPT"
VERSION = 1


class CheckpointError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def encode(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"too many dims for {name}")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)))
    parts.append(meta)
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(
                f"truncated while reading {what}: need {n} bytes, {len(self.data) - self.pos} left",
                self.pos,
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(data: bytes) -> Checkpoint:
    r = _Reader(data)
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}", len(MAGIC))
    (count,) = r.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        start = r.pos
        (name_len,) = r.unpack("<H", "name length")
        try:
            name = r.take(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError("tensor name is not UTF-8", start) from e
        (ndim,) = r.unpack("<B", f"ndim of {name}")
        dims = r.unpack(f"<{ndim}I", f"dims of {name}")
        size = int(np.prod(dims, dtype=np.int64))
        payload = r.take(4 * size, f"payload of {name}")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name}", start)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    (meta_len,) = r.unpack("<I", "metadata length")
    meta_start = r.pos
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"metadata is not valid JSON: {e}", meta_start) from e
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes", r.pos)
    return Checkpoint(tensors, meta)


def save(path: str | Path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(ckpt))
    tmp.replace(path)


def load(path: str | Path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def plan_tensors(prefix: str, noise: np.ndarray) -> dict[str, np.ndarray]:
    """Plans serialize as their noise; order and masks are re-derived on load."""
    if not np.array_equal(np.asarray(noise, dtype=np.float32).astype(np.float64), noise):
        raise CheckpointError("plan noise is not exactly representable in float32")
    return {f"{prefix}.noise": np.asarray(noise, dtype=np.float32)}
