"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"BITA" | u32 version | u32 header_len | header JSON (utf-8)
    | payload: f32 arrays concatenated in header order | u32 CRC32(payload)

The header maps tensor name -> {"shape": [...], "dtype": "f32"}; the
reserved key ``__meta__`` carries stage tag, configs and vocabulary.
"""
from __future__ import annotations

import json
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ShapeError
from .optim import OptimState

MAGIC = b"BITA"
VERSION = 1
META_KEY = "__meta__"

__all__ = ["Checkpoint", "CheckpointError", "save_checkpoint", "load_checkpoint", "MAGIC", "VERSION"]


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    meta: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        header = OrderedDict()
        header[META_KEY] = self.meta
        chunks = []
        for name, arr in self.tensors.items():
            a = np.asarray(arr, dtype="<f4")
            header[name] = {"shape": list(a.shape), "dtype": "f32"}
            chunks.append(a.tobytes())
        payload = b"".join(chunks)
        head = json.dumps(header, separators=(",", ":")).encode()
        return (MAGIC + struct.pack("<II", VERSION, len(head)) + head + payload
                + struct.pack("<I", zlib.crc32(payload)))

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < 16 or data[:4] != MAGIC:
            raise CheckpointError("not a BITA checkpoint (bad magic)")
        version, head_len = struct.unpack("<II", data[4:12])
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
        head_end = 12 + head_len
        try:
            header = json.loads(data[12:head_end].decode(), object_pairs_hook=OrderedDict)
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError("corrupt checkpoint header") from exc
        payload = data[head_end:-4]
        (crc,) = struct.unpack("<I", data[-4:])
        if zlib.crc32(payload) != crc:
            raise CheckpointError("checkpoint CRC mismatch: payload is corrupt")
        meta = header.pop(META_KEY, {})
        tensors: OrderedDict[str, np.ndarray] = OrderedDict()
        offset = 0
        for name, info in header.items():
            if info.get("dtype") != "f32":
                raise CheckpointError(f"tensor {name!r} has unsupported dtype {info.get('dtype')!r}")
            shape = tuple(int(s) for s in info["shape"])
            n = int(np.prod(shape)) if shape else 1
            chunk = payload[offset:offset + 4 * n]
            if len(chunk) != 4 * n:
                raise CheckpointError(f"payload truncated at tensor {name!r}")
            tensors[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
            offset += 4 * n
        if offset != len(payload):
            raise CheckpointError("payload has trailing bytes")
        return cls(tensors, meta)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def pack(params: dict, optim: OptimState | None, meta: dict) -> Checkpoint:
    """Snapshot parameters (and optimizer moments) at storage precision."""
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, p in params.items():
        tensors[name] = np.asarray(p.data, dtype="<f4").copy()
    meta = dict(meta)
    if optim is not None:
        meta["optim_t"] = optim.t
        for name in params:
            if name in optim.m:
                tensors[f"optim.m.{name}"] = np.asarray(optim.m[name], dtype="<f4").copy()
                tensors[f"optim.v.{name}"] = np.asarray(optim.v[name], dtype="<f4").copy()
    return Checkpoint(tensors, meta)


def restore(ckpt: Checkpoint, params: dict, strict: bool = True) -> OptimState:
    """Copy checkpoint tensors into ``params`` (name -> Tensor); returns optimizer state."""
    problems = []
    for name, p in params.items():
        if name not in ckpt.tensors:
            if strict:
                problems.append(f"missing tensor {name!r}")
            continue
        arr = ckpt.tensors[name]
        if arr.shape != p.shape:
            problems.append(f"tensor {name!r}: checkpoint shape {arr.shape} != model shape {p.shape}")
    if problems:
        raise ShapeError("; ".join(problems))
    for name, p in params.items():
        if name in ckpt.tensors:
            p.data = ckpt.tensors[name].astype(np.float64)
    state = OptimState(t=int(ckpt.meta.get("optim_t", 0)))
    for name in params:
        m = ckpt.tensors.get(f"optim.m.{name}")
        if m is not None:
            state.m[name] = m.astype(np.float64)
            state.v[name] = ckpt.tensors[f"optim.v.{name}"].astype(np.float64)
    return state


def save_checkpoint(model, optim: OptimState | None, path, meta: dict | None = None) -> Checkpoint:
    """Store the trainable parameters of ``model`` (frozen parts are seed-derived)."""
    meta = dict(meta or {})
    meta.setdefault("model", model.config.to_dict())
    ckpt = pack(model.trainable_parameters("all"), optim, meta)
    ckpt.save(path)
    return ckpt


def load_checkpoint(path):
    """Rebuild the model recorded in a checkpoint; returns ``(model, optim_state, meta)``."""
    from .model import BitaModel, ModelConfig

    ckpt = Checkpoint.load(path)
    if "model" not in ckpt.meta:
        raise CheckpointError("checkpoint carries no model configuration")
    model = BitaModel(ModelConfig.from_dict(ckpt.meta["model"]))
    state = restore(ckpt, model.trainable_parameters("all"))
    return model, state, ckpt.meta
