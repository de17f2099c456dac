"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"SBN1"                      magic
    u32 version                  currently 1
    u32 n, n bytes               config record: UTF-8 "key=<json value>" lines, keys sorted
    u32 count                    number of tensors, then per tensor (names sorted):
        u16 n, n bytes           UTF-8 name
        u8 dtype tag             1 = float32
        u8 rank, rank x u32      extents
        payload                  little-endian float32, C order
    8 bytes                      BLAKE2b-64 digest of every preceding byte

Record keys are namespaced: ``config.*`` (ModelConfig fields), ``meta.*``
(free-form metadata, e.g. vocab tokens and data position), ``optim.*``
(Adam hyperparameters and step) and ``rng`` (PCG64 state).  Optimizer
moments are stored as tensors named ``optim.m/<param>`` and
``optim.v/<param>``.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import ModelConfig
from .optim import OptimState

MAGIC = b"SBN1"
VERSION = 1
DTYPE_F32 = 1
_OPTIM_KEYS = ("step", "beta1", "beta2", "eps", "weight_decay")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    step: int = 0
    optim: OptimState | None = None
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)


def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def _record(ckpt: Checkpoint) -> bytes:
    entries = {f"config.{k}": v for k, v in ckpt.config.to_dict().items()}
    entries["step"] = ckpt.step
    for k, v in ckpt.meta.items():
        entries[f"meta.{k}"] = v
    if ckpt.optim is not None:
        for k in _OPTIM_KEYS:
            entries[f"optim.{k}"] = getattr(ckpt.optim, k)
    if ckpt.rng_state is not None:
        entries["rng"] = ckpt.rng_state
    lines = []
    for key in sorted(entries):
        if "\n" in key or "=" in key:
            raise CheckpointError(f"invalid record key {key!r}")
        lines.append(f"{key}={json.dumps(entries[key], sort_keys=True, separators=(',', ':'), ensure_ascii=False)}")
    return "\n".join(lines).encode("utf-8")


def _all_tensors(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    out = dict(ckpt.tensors)
    if ckpt.optim is not None:
        for name, arr in ckpt.optim.m.items():
            out[f"optim.m/{name}"] = arr
        for name, arr in ckpt.optim.v.items():
            out[f"optim.v/{name}"] = arr
    return out


def to_bytes(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    record = _record(ckpt)
    parts += [struct.pack("<I", len(record)), record]
    tensors = _all_tensors(ckpt)
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", DTYPE_F32, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + _digest(body)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, digest = data[:-8], data[-8:]
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if _digest(body) != digest:
        raise CheckpointError("checksum mismatch: checkpoint corrupt or truncated")
    r = _Reader(body)
    r.take(8)
    (n,) = r.unpack("<I")
    entries = {}
    for line in r.take(n).decode("utf-8").split("\n"):
        if not line:
            continue
        key, _, value = line.partition("=")
        entries[key] = json.loads(value)
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode("utf-8")
        tag, rank = r.unpack("<BB")
        if tag != DTYPE_F32:
            raise CheckpointError(f"unknown dtype tag {tag} for {name}")
        shape = r.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name}")
        tensors[name] = arr
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after tensor directory")

    config = ModelConfig.from_dict({k[7:]: v for k, v in entries.items() if k.startswith("config.")})
    meta = {k[5:]: v for k, v in entries.items() if k.startswith("meta.")}
    optim = None
    if "optim.step" in entries:
        optim = OptimState(**{k: entries[f"optim.{k}"] for k in _OPTIM_KEYS})
        for name in list(tensors):
            if name.startswith("optim.m/"):
                optim.m[name[8:]] = tensors.pop(name)
            elif name.startswith("optim.v/"):
                optim.v[name[8:]] = tensors.pop(name)
    return Checkpoint(config, tensors, entries.get("step", 0), optim, entries.get("rng"), meta)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write atomically: a crash mid-write leaves any previous file intact."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes())
