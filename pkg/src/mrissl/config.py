"""Declarative experiment configuration (JSON).

A config document has the sections ``data``, ``model``, ``pretrain``,
``finetune``, ``metrics`` and ``io``. Every section is optional; missing keys
take the defaults below. Unknown keys anywhere are rejected, all at once.

Relative paths are resolved against the config file's directory, or against
``$MRISSL_DATA_ROOT`` when that is set.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .blocks import TransformerConfig
from .data import SEQUENCES, TUMOR_CLASSES
from .models import ModelConfig
from .training import FinetuneConfig, PretrainConfig

DATA_ROOT_ENV = "MRISSL_DATA_ROOT"


class ConfigError(ValueError):
    """Invalid experiment configuration; ``problems`` lists every offending key."""

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


@dataclass
class DataSection:
    train_manifest: str | None = None
    test_manifest: str | None = None
    sequence: str | None = None  # restrict classification records to one sequence
    train_fraction: float = 0.8
    split_seed: int = 0
    slice_size: int = 256
    tumor_classes: tuple[str, ...] = ("glioma", "meningioma")


@dataclass
class MetricsSection:
    max_val: float = 1.0
    data_range: float | None = None


@dataclass
class IOSection:
    runlog: str | None = None  # stem; defaults to <out>.runlog
    checkpoint_dir: str | None = None
    figures: bool = True


MODEL_PRESETS = {"full": ModelConfig, "toy": ModelConfig.toy}


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    model_preset: str = "full"
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    io: IOSection = field(default_factory=IOSection)
    base_dir: Path = field(default_factory=Path.cwd)

    def to_dict(self) -> dict[str, Any]:
        model = self.model.to_dict()
        return {
            "data": _plain(asdict(self.data)),
            "model": {"preset": self.model_preset, **model},
            "pretrain": _plain(asdict(self.pretrain)),
            "finetune": _plain(asdict(self.finetune)),
            "metrics": asdict(self.metrics),
            "io": asdict(self.io),
        }

    @property
    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def path(self, value: str | None) -> Path | None:
        if value is None:
            return None
        p = Path(value)
        if p.is_absolute():
            return p
        root = os.environ.get(DATA_ROOT_ENV)
        return Path(root) / p if root else self.base_dir / p

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(
            self,
            pretrain=dataclasses.replace(self.pretrain, seed=seed),
            finetune=dataclasses.replace(self.finetune, seed=seed),
            data=dataclasses.replace(self.data, split_seed=seed),
        )


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def _section(cls, raw: Any, where: str, problems: list[str], exclude: set[str] = frozenset()):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        problems.append(f"{where}: expected an object")
        return None
    allowed = _names(cls) - exclude
    for key in sorted(set(raw) - allowed):
        problems.append(f"{where}.{key}: unknown key")
    return {k: v for k, v in raw.items() if k in allowed}


def _build(cls, kwargs: dict, where: str, problems: list[str]):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"{where}: {exc}")
        return None


def parse_config(doc: Any, base_dir: str | Path | None = None) -> ExperimentConfig:
    """Validate a parsed JSON document; raises ConfigError naming every bad key."""
    problems: list[str] = []
    if not isinstance(doc, dict):
        raise ConfigError(["config: top level must be an object"])
    sections = {"data", "model", "pretrain", "finetune", "metrics", "io"}
    for key in sorted(set(doc) - sections):
        problems.append(f"{key}: unknown section")

    data_kw = _section(DataSection, doc.get("data"), "data", problems)
    metrics_kw = _section(MetricsSection, doc.get("metrics"), "metrics", problems)
    io_kw = _section(IOSection, doc.get("io"), "io", problems)
    pre_kw = _section(PretrainConfig, doc.get("pretrain"), "pretrain", problems)
    fine_kw = _section(FinetuneConfig, doc.get("finetune"), "finetune", problems)

    raw_model = doc.get("model") or {}
    model_kw = None
    preset = "full"
    if not isinstance(raw_model, dict):
        problems.append("model: expected an object")
    else:
        raw_model = dict(raw_model)
        preset = raw_model.pop("preset", "full")
        if preset not in MODEL_PRESETS:
            problems.append(f"model.preset: must be one of {sorted(MODEL_PRESETS)}, got {preset!r}")
            preset = "full"
        model_kw = _section(ModelConfig, raw_model, "model", problems)
        t = model_kw.get("transformer") if model_kw else None
        if isinstance(t, dict):
            t_kw = _section(TransformerConfig, t, "model.transformer", problems)
            model_kw["transformer"] = _build(TransformerConfig, t_kw or {}, "model.transformer", problems)
        elif t is not None:
            problems.append("model.transformer: expected an object")

    if data_kw is not None:
        seq = data_kw.get("sequence")
        if seq is not None and seq not in SEQUENCES:
            problems.append(f"data.sequence: unknown sequence {seq!r}")
        bad = set(data_kw.get("tumor_classes", ())) - TUMOR_CLASSES
        if bad:
            problems.append(f"data.tumor_classes: not tumor classes {sorted(bad)}")
        if "tumor_classes" in data_kw:
            data_kw["tumor_classes"] = tuple(data_kw["tumor_classes"])
        frac = data_kw.get("train_fraction", 0.8)
        if not isinstance(frac, (int, float)) or not 0 < frac < 1:
            problems.append(f"data.train_fraction: must be in (0, 1), got {frac!r}")
    if problems:
        raise ConfigError(problems)

    data = _build(DataSection, data_kw, "data", problems)
    metrics = _build(MetricsSection, metrics_kw, "metrics", problems)
    io = _build(IOSection, io_kw, "io", problems)
    pretrain = _build(PretrainConfig, pre_kw, "pretrain", problems)
    finetune = _build(FinetuneConfig, fine_kw, "finetune", problems)
    model = None
    if model_kw is not None and (model_kw.get("transformer", 0) is not None):
        try:
            model = MODEL_PRESETS[preset](**model_kw)
        except (TypeError, ValueError) as exc:
            problems.append(f"model: {exc}")
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(data, model, preset, pretrain, finetune, metrics, io,
                            Path(base_dir) if base_dir else Path.cwd())


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return parse_config({})
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError([f"{path}: config file not found"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: invalid JSON ({exc})"]) from None
    return parse_config(doc, path.parent)


def default_document() -> dict[str, Any]:
    """Every section with its default values (printed by ``mrissl config``)."""
    return parse_config({}).to_dict()
