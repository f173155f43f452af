"""Activation dumps: ``index.json`` plus one little-endian float32 blob per module output."""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Any, Iterable

import numpy as np
import torch
import torch.nn as nn

INDEX = "index.json"


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name) or "root"


@torch.no_grad()
def dump_activations(module: nn.Module, x: torch.Tensor, directory: str | Path,
                     prefixes: Iterable[str] | None = None, meta: dict[str, Any] | None = None) -> Path:
    """Run ``module(x)`` in eval mode and write every submodule's tensor output.

    ``prefixes`` restricts the dump to submodules whose dotted name starts
    with one of them (the root output is always written as ``output``).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    prefixes = tuple(prefixes) if prefixes else None
    captured: list[tuple[str, str, torch.Tensor]] = []
    hooks = []
    for name, sub in module.named_modules():
        if not name or (prefixes and not name.startswith(prefixes)):
            continue

        def hook(_m, _inp, out, name=name, kind=type(sub).__name__):
            if torch.is_tensor(out):
                captured.append((name, kind, out.detach()))
        hooks.append(sub.register_forward_hook(hook))
    was_training = module.training
    module.eval()
    try:
        out = module(x)
    finally:
        for h in hooks:
            h.remove()
        module.train(was_training)
    captured.append(("output", type(module).__name__, out))
    entries = []
    seen: dict[str, int] = {}
    for i, (name, kind, t) in enumerate(captured):
        # a module called more than once gets name#2, name#3, ...
        seen[name] = seen.get(name, 0) + 1
        if seen[name] > 1:
            name = f"{name}#{seen[name]}"
        fname = f"{i:04d}_{_safe(name)}.f32"
        arr = t.float().cpu().contiguous().numpy()
        arr.astype("<f4").tofile(directory / fname)
        fin = arr[np.isfinite(arr)]
        entries.append({"name": name, "module": kind, "shape": list(arr.shape), "dtype": "float32",
                        "file": fname, "min": float(fin.min()) if fin.size else None,
                        "max": float(fin.max()) if fin.size else None,
                        "finite": bool(fin.size == arr.size)})
    index = directory / INDEX
    index.write_text(json.dumps({"input_shape": list(x.shape), "meta": meta or {}, "tensors": entries}, indent=1))
    return index


def load_activations(directory: str | Path) -> dict[str, np.ndarray]:
    directory = Path(directory)
    doc = json.loads((directory / INDEX).read_text())
    out = {}
    for e in doc["tensors"]:
        arr = np.fromfile(directory / e["file"], dtype="<f4")
        out[e["name"]] = arr.reshape(e["shape"])
    return out
