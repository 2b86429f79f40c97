"""Binary checkpoint container.

Layout: magic ``X3D1`` followed by sections, each ``u32 name length, name,
u64 payload length, payload`` (little-endian). Array payloads hold a ``u32``
count, then per array its name, ``u32`` rank, ``u64`` dims and raw
little-endian float64 data.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch

from .errors import ConfigError
from .optim import OptimState

MAGIC = b"X3D1"


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def encode_arrays(arrays: Dict[str, np.ndarray]) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        out.write(_pack_str(name))
        out.write(struct.pack("<I", a.ndim))
        out.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        out.write(a.tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ConfigError("checkpoint is truncated")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def done(self) -> bool:
        return self.pos == len(self.data)


def decode_arrays(data: bytes) -> Dict[str, np.ndarray]:
    r = _Reader(data)
    out = {}
    for _ in range(r.u32()):
        name = r.string()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}Q", r.take(8 * ndim)) if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    return out


@dataclass
class Checkpoint:
    phase: int
    iteration: int
    params: Dict[str, np.ndarray]
    optimizer: Dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_step: int = 0
    rng_state: dict = field(default_factory=dict)
    config_hash: str = ""
    meta: dict = field(default_factory=dict)


def to_bytes(ck: Checkpoint) -> bytes:
    meta = dict(ck.meta, phase=ck.phase, iteration=ck.iteration, optimizer_step=ck.optimizer_step)
    sections = [
        ("meta", json.dumps(meta, sort_keys=True).encode()),
        ("config_hash", ck.config_hash.encode("ascii")),
        ("params", encode_arrays(ck.params)),
        ("optimizer", encode_arrays(ck.optimizer)),
        ("rng_state", json.dumps(ck.rng_state, sort_keys=True).encode()),
    ]
    out = io.BytesIO()
    out.write(MAGIC)
    for name, payload in sections:
        out.write(_pack_str(name))
        out.write(struct.pack("<Q", len(payload)))
        out.write(payload)
    return out.getvalue()


def from_bytes(data: bytes) -> Checkpoint:
    if data[:4] != MAGIC:
        raise ConfigError("not a checkpoint file (bad magic)")
    r = _Reader(data[4:])
    sec = {}
    while not r.done():
        name = r.string()
        sec[name] = r.take(r.u64())
    missing = {"meta", "config_hash", "params", "optimizer", "rng_state"} - sec.keys()
    if missing:
        raise ConfigError(f"checkpoint lacks sections {sorted(missing)}")
    meta = json.loads(sec["meta"])
    return Checkpoint(phase=meta.pop("phase"), iteration=meta.pop("iteration"),
                      params=decode_arrays(sec["params"]),
                      optimizer=decode_arrays(sec["optimizer"]),
                      optimizer_step=meta.pop("optimizer_step"),
                      rng_state=json.loads(sec["rng_state"]),
                      config_hash=sec["config_hash"].decode("ascii"), meta=meta)


def save(path, ck: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ck))


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def optim_arrays(state: Optional[OptimState]) -> Dict[str, np.ndarray]:
    if state is None:
        return {}
    return {f"{name}/{key}": t.detach().numpy().copy()
            for name, per in state.slots.items() for key, t in per.items()}


def restore_optim(state: OptimState, arrays: Dict[str, np.ndarray], step: int) -> None:
    state.step = int(step)
    state.slots = {}
    for full, a in arrays.items():
        name, key = full.rsplit("/", 1)
        state.slots.setdefault(name, {})[key] = torch.from_numpy(a.copy())
