"""Named-tensor checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes   b"MRSSLCK1"
    manifest   u32 length + UTF-8 JSON
    count      u32 number of tensor blocks
    block      u16 name length, name (UTF-8)
               u8 dtype length, dtype name ("float32", "float64", "int64", ...)
               u8 ndim, ndim x u64 shape
               u64 payload bytes, u32 CRC-32 of payload, payload (little-endian, C order)

Tensor names are hierarchical: ``encoder.*``, ``art.{1..9}.*``, ``decoder.*``,
``head.*``, ``disc.*`` and ``optim.<name>.*`` for optimizer state.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn as nn
from torch import Tensor

MAGIC = b"MRSSLCK1"


class CheckpointError(ValueError):
    """Raised for unreadable or inconsistent checkpoint files; names the offending section."""

    def __init__(self, section: str, message: str):
        super().__init__(f"checkpoint [{section}]: {message}")
        self.section = section


@dataclass
class Checkpoint:
    tensors: dict[str, Tensor]
    manifest: dict[str, Any] = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, Tensor]:
        """Tensors under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}

    def load_into(self, module: nn.Module, prefix: str = "") -> None:
        """Strict, shape-checked load of ``prefix.*`` tensors into ``module``."""
        src = self.group(prefix) if prefix else {
            k: v for k, v in self.tensors.items() if not k.startswith(("optim.", "disc."))
        }
        load_state_strict(module, src, where=prefix or "model")


def load_state_strict(module: nn.Module, src: dict[str, Tensor], where: str = "model") -> None:
    state = module.state_dict()
    missing = [k for k in state if k not in src]
    unexpected = [k for k in src if k not in state]
    mismatched = [
        f"{k}: {tuple(src[k].shape)} vs {tuple(state[k].shape)}"
        for k in state
        if k in src and tuple(src[k].shape) != tuple(state[k].shape)
    ]
    if missing or unexpected or mismatched:
        parts = []
        if mismatched:
            parts.append("shape mismatch " + ", ".join(mismatched))
        if missing:
            parts.append("missing " + ", ".join(missing))
        if unexpected:
            parts.append("unexpected " + ", ".join(unexpected))
        raise CheckpointError(where, "; ".join(parts))
    with torch.no_grad():
        for k, v in state.items():
            v.copy_(src[k])


def module_tensors(**modules: nn.Module) -> dict[str, Tensor]:
    """Flatten models into one name -> tensor mapping.

    Keyword ``model`` contributes its state dict as-is (its own child names
    such as ``encoder.`` already carry the hierarchy); any other keyword is
    used as a prefix.
    """
    out: dict[str, Tensor] = {}
    for key, mod in modules.items():
        prefix = "" if key == "model" else key + "."
        for name, t in mod.state_dict().items():
            out[prefix + name] = t.detach().clone()
    return out


def optimizer_tensors(opt: torch.optim.Optimizer, names: list[str], prefix: str) -> dict[str, Tensor]:
    """Adam-style per-parameter state keyed by parameter name."""
    params = [p for g in opt.param_groups for p in g["params"]]
    if len(params) != len(names):
        raise ValueError("parameter name list does not match optimizer parameters")
    out = {}
    for name, p in zip(names, params):
        for key, val in opt.state.get(p, {}).items():
            t = val if torch.is_tensor(val) else torch.tensor(val)
            out[f"optim.{prefix}.{name}.{key}"] = t.detach().clone()
    return out


def restore_optimizer(opt: torch.optim.Optimizer, names: list[str], prefix: str, ckpt: Checkpoint) -> None:
    params = [p for g in opt.param_groups for p in g["params"]]
    stem = f"optim.{prefix}."
    for name, p in zip(names, params):
        keys = {
            k[len(stem) + len(name) + 1:]: v
            for k, v in ckpt.tensors.items()
            if k.startswith(stem + name + ".") and "." not in k[len(stem) + len(name) + 1:]
        }
        if keys:
            opt.state[p] = {k: v.clone() for k, v in keys.items()}


def digest(values: list[float] | list[list[float]]) -> str:
    arr = np.asarray(values, dtype="<f8")
    return hashlib.sha256(arr.tobytes()).hexdigest()


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    manifest = json.dumps(ckpt.manifest, sort_keys=True).encode()
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", len(manifest)) + manifest
    buf += struct.pack("<I", len(ckpt.tensors))
    for name, t in ckpt.tensors.items():
        arr = t.detach().cpu().contiguous().numpy()
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        nm = name.encode()
        dt = arr.dtype.name.encode()
        buf += struct.pack("<H", len(nm)) + nm
        buf += struct.pack("<B", len(dt)) + dt
        buf += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += struct.pack("<QI", len(data), zlib.crc32(data)) + data
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, section: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(section, "truncated file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, section: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), section))


def load_checkpoint(path: str | Path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC), "header") != MAGIC:
        raise CheckpointError("header", "bad magic bytes")
    (mlen,) = r.unpack("<I", "manifest")
    try:
        manifest = json.loads(r.take(mlen, "manifest").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("manifest", f"invalid JSON ({exc})") from None
    (count,) = r.unpack("<I", "tensor count")
    tensors: dict[str, Tensor] = {}
    for i in range(count):
        section = f"tensor #{i}"
        (nlen,) = r.unpack("<H", section)
        name = r.take(nlen, section).decode(errors="replace")
        section = f"tensor {name}"
        (dlen,) = r.unpack("<B", section)
        dtype_name = r.take(dlen, section).decode(errors="replace")
        try:
            dtype = np.dtype(dtype_name).newbyteorder("<")
        except TypeError:
            raise CheckpointError(section, f"unknown dtype {dtype_name!r}") from None
        (ndim,) = r.unpack("<B", section)
        shape = r.unpack(f"<{ndim}Q", section)
        nbytes, crc = r.unpack("<QI", section)
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise CheckpointError(section, "payload size does not match shape")
        data = r.take(nbytes, section)
        if zlib.crc32(data) != crc:
            raise CheckpointError(section, "CRC mismatch")
        if name in tensors:
            raise CheckpointError(section, "duplicate tensor name")
        arr = np.frombuffer(data, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        tensors[name] = torch.from_numpy(arr.copy())
    if r.pos != len(r.data):
        raise CheckpointError("trailer", f"{len(r.data) - r.pos} unexpected trailing bytes")
    return Checkpoint(tensors=tensors, manifest=manifest)
