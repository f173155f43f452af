"""Deterministic training engine for GAN pretraining and classifier fine-tuning.

Randomness is derived from ``(seed, step)`` and ``(seed, epoch)`` rather than
carried in global state, so a run resumed from a checkpoint at step k replays
steps k+1.. exactly as an uninterrupted run would.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import torch
from torch import Tensor

from . import losses
from .checkpoint import (Checkpoint, digest, load_state_strict, module_tensors,
                         optimizer_tensors, restore_optimizer, save_checkpoint)
from .data import CLASSES, SEQUENCES, DatasetManifest, SliceRecord, slot_input
from .metrics import ClassificationReport, SynthesisReport, classification_report, synthesis_report
from .models import Classifier, Discriminator, Generator, ModelConfig, build_discriminator, transfer_weights

log = logging.getLogger(__name__)

PRETRAIN_COLUMNS = ["step", "l_pix", "l_rec", "l_adv_G", "l_adv_D", "total"]
FINETUNE_COLUMNS = ["step", "epoch", "loss"]


class NumericFailure(FloatingPointError):
    """Non-finite loss; ``dump`` holds the diagnostic snapshot."""

    def __init__(self, message: str, dump: dict[str, Any]):
        super().__init__(message)
        self.dump = dump


@dataclass
class PretrainConfig:
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epochs: int = 100
    batch: int = 4
    source: str = "T1"
    target: str = "T2"
    sequences: tuple[str, ...] = SEQUENCES
    lambda_pix: float = 100.0
    lambda_rec: float = 100.0
    lambda_adv: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0  # steps; 0 disables periodic checkpoints

    def __post_init__(self) -> None:
        self.sequences = tuple(self.sequences)
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be >= 1")
        if self.source == self.target:
            raise ValueError("source and target sequences must differ")
        for s in (self.source, self.target):
            if s not in self.sequences:
                raise ValueError(f"sequence {s!r} not among slots {self.sequences}")
        self.weights  # validates

    @property
    def weights(self) -> losses.LossWeights:
        return losses.LossWeights(self.lambda_pix, self.lambda_rec, self.lambda_adv)


@dataclass
class FinetuneConfig:
    lr: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    batch: int = 16
    epochs: int = 100
    init: str = "fresh"  # "fresh" or a checkpoint path
    freeze_groups: tuple[str, ...] = ()
    classes: tuple[str, ...] = CLASSES
    sequences: tuple[str, ...] = SEQUENCES
    seed: int = 0

    def __post_init__(self) -> None:
        self.freeze_groups = tuple(self.freeze_groups)
        self.classes = tuple(self.classes)
        self.sequences = tuple(self.sequences)
        if self.lr <= 0 or self.batch < 1 or self.epochs < 1:
            raise ValueError("lr must be positive, batch and epochs >= 1")
        unknown = set(self.classes) - set(CLASSES)
        if unknown:
            raise ValueError(f"unknown classes {sorted(unknown)}")


def config_digest(*parts: Any) -> str:
    blob = json.dumps([asdict(p) if hasattr(p, "__dataclass_fields__") else p for p in parts],
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class RunLog:
    kind: str
    seed: int
    config_digest: str
    steps: list[dict[str, float]] = field(default_factory=list)
    epochs: list[dict[str, Any]] = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        return PRETRAIN_COLUMNS if self.kind == "pretrain" else FINETUNE_COLUMNS

    def losses(self, key: str = "total") -> list[float]:
        return [s[key] for s in self.steps]

    def write(self, stem: str | Path) -> tuple[Path, Path]:
        stem = Path(stem)
        csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for s in self.steps:
                w.writerow([repr(s[c]) if isinstance(s[c], float) else s[c] for c in self.columns])
        json_path.write_text(json.dumps(asdict(self), indent=1))
        return csv_path, json_path

    @classmethod
    def read(cls, path: str | Path) -> "RunLog":
        path = Path(path)
        if path.suffix == ".csv":
            path = path.with_suffix(".json")
        return cls(**json.loads(path.read_text()))


def _step_seed(seed: int, step: int) -> None:
    torch.manual_seed(int(np.random.SeedSequence([seed, step]).generate_state(1)[0]))


def _epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 7]).permutation(n)


def _check_finite(values: dict[str, Tensor], step: int, extra: dict[str, Any]) -> None:
    bad = {k: v.item() for k, v in values.items() if not math.isfinite(v.item())}
    if bad:
        dump = {"step": step, "losses": {k: v.item() for k, v in values.items()}, **extra}
        raise NumericFailure(f"non-finite loss at step {step}: {bad}", dump)


# ---------------------------------------------------------------- stage 1

@dataclass
class PretrainState:
    generator: Generator
    discriminator: Discriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    step: int = 0


def new_pretrain_state(model_cfg: ModelConfig, cfg: PretrainConfig) -> PretrainState:
    torch.manual_seed(cfg.seed)
    g = Generator(model_cfg)
    d = build_discriminator(model_cfg)
    betas = (cfg.beta1, cfg.beta2)
    return PretrainState(g, d, torch.optim.Adam(g.parameters(), cfg.lr, betas),
                         torch.optim.Adam(d.parameters(), cfg.lr, betas))


def pair_stack(pairs: Sequence[tuple[SliceRecord, SliceRecord]], slots: Sequence[str]) -> Tensor:
    """(N, I, S, S) image stack holding source and target of each pair in their slots."""
    slots = list(slots)
    size = pairs[0][0].pixels.shape
    m = torch.zeros(len(pairs), len(slots), *size)
    for i, (s, t) in enumerate(pairs):
        m[i, slots.index(s.sequence)] = torch.from_numpy(s.pixels)
        m[i, slots.index(t.sequence)] = torch.from_numpy(t.pixels)
    return m


def pretrain_step(state: PretrainState, m: Tensor, cfg: PretrainConfig) -> dict[str, float]:
    """One discriminator update then one generator update on the image stack ``m``."""
    g, d = state.generator, state.discriminator
    g.train()
    d.train()
    slots = list(cfg.sequences)
    a = losses.availability_mask(slots, [cfg.source])
    idx = [slots.index(cfg.source), slots.index(cfg.target)]
    # slots outside the source/target pair carry no data and no loss
    used = torch.zeros(len(slots), dtype=m.dtype)
    used[idx] = 1
    used = used.reshape(1, -1, 1, 1)
    x = losses.masked_input(m, a)
    real = m * used

    _step_seed(cfg.seed, state.step)
    fake = g(x) * used
    state.opt_d.zero_grad(set_to_none=True)
    l_d = losses.l_adv_d(d(torch.cat([x, real], 1)), d(torch.cat([x, fake.detach()], 1)))
    _check_finite({"l_adv_D": l_d}, state.step, {"phase": "discriminator"})
    l_d.backward()
    state.opt_d.step()

    state.opt_g.zero_grad(set_to_none=True)
    pix = losses.l_pix(fake[:, idx], m[:, idx], a[idx])
    rec = losses.l_rec(fake[:, idx], m[:, idx], a[idx])
    adv = losses.l_adv_g(d(torch.cat([x, fake], 1)))
    parts = {"l_pix": pix, "l_rec": rec, "l_adv_G": adv}
    _check_finite(parts, state.step, {"phase": "generator"})
    total = losses.total_generator_loss(pix, rec, adv, cfg.weights)
    total.backward()
    state.opt_g.step()
    state.step += 1
    return {"step": state.step, "l_pix": pix.item(), "l_rec": rec.item(), "l_adv_G": adv.item(),
            "l_adv_D": l_d.item(), "total": total.item()}


def pair_records(source: DatasetManifest, target: DatasetManifest) -> list[tuple[SliceRecord, SliceRecord]]:
    """Match source and target slices of the same case, slice index, and class."""
    tgt = {r.pair_key: r for r in target.records if r.provenance == "real"}
    pairs = [(s, tgt[s.pair_key]) for s in source.records if s.provenance == "real" and s.pair_key in tgt]
    pairs.sort(key=lambda p: (p[0].case_id, p[0].slice_index or -1, p[0].class_label))
    return pairs


def pretrain_checkpoint(state: PretrainState, model_cfg: ModelConfig, cfg: PretrainConfig,
                        runlog: RunLog) -> Checkpoint:
    g_names = [n for n, _ in state.generator.named_parameters()]
    d_names = [n for n, _ in state.discriminator.named_parameters()]
    tensors = module_tensors(model=state.generator, disc=state.discriminator)
    tensors.update(optimizer_tensors(state.opt_g, g_names, "g"))
    tensors.update(optimizer_tensors(state.opt_d, d_names, "d"))
    manifest = {
        "kind": "generator", "model": model_cfg.to_dict(), "pretrain": asdict(cfg),
        "step": state.step, "seed": cfg.seed, "config_digest": runlog.config_digest,
        "loss_digest": digest([[s[c] for c in PRETRAIN_COLUMNS[1:]] for s in runlog.steps]),
        "losses": runlog.steps,
    }
    return Checkpoint(tensors, manifest)


def restore_pretrain_state(ckpt: Checkpoint, cfg: PretrainConfig) -> tuple[PretrainState, ModelConfig, list]:
    model_cfg = ModelConfig.from_dict(ckpt.manifest["model"])
    state = new_pretrain_state(model_cfg, cfg)
    load_state_strict(state.generator, {k: v for k, v in ckpt.tensors.items()
                                        if not k.startswith(("disc.", "optim."))}, "generator")
    load_state_strict(state.discriminator, ckpt.group("disc"), "disc")
    restore_optimizer(state.opt_g, [n for n, _ in state.generator.named_parameters()], "g", ckpt)
    restore_optimizer(state.opt_d, [n for n, _ in state.discriminator.named_parameters()], "d", ckpt)
    state.step = int(ckpt.manifest["step"])
    return state, model_cfg, list(ckpt.manifest.get("losses", []))


@torch.no_grad()
def evaluate_synthesis(generator: Generator, pairs, cfg: PretrainConfig, max_val: float = 1.0,
                       data_range: float | None = None) -> SynthesisReport:
    """Metrics on the [0, 1]-rescaled target slot for every (source, target) pair."""
    generator.eval()
    slots = list(cfg.sequences)
    a = losses.availability_mask(slots, [cfg.source])
    t = slots.index(cfg.target)
    out = []
    for i in range(0, len(pairs), 16):
        chunk = pairs[i:i + 16]
        m = pair_stack(chunk, slots)
        y = generator(losses.masked_input(m, a))[:, t]
        for (_, tgt), syn in zip(chunk, y):
            out.append(((tgt.pixels.astype(np.float64) + 1) / 2, (syn.numpy().astype(np.float64) + 1) / 2))
    return synthesis_report(out, max_val=max_val, data_range=data_range)


def run_pretrain(source: DatasetManifest, target: DatasetManifest, model_cfg: ModelConfig,
                 cfg: PretrainConfig, *, test: tuple[DatasetManifest, DatasetManifest] | None = None,
                 resume: Checkpoint | None = None, max_steps: int | None = None,
                 checkpoint_dir: str | Path | None = None, digest_override: str | None = None,
                 progress: Callable[[dict], None] | None = None,
                 ) -> tuple[Checkpoint, RunLog, SynthesisReport | None]:
    """Epoch loop over seeded shuffled batches of paired slices.

    ``max_steps`` stops early (used to produce resumable mid-run checkpoints);
    ``test`` pairs are evaluated once at the end. ``digest_override`` replaces
    the recorded config digest (the CLI records the whole experiment config);
    ``progress`` receives the last step record of every epoch.
    """
    pairs = pair_records(source, target)
    if not pairs:
        raise ValueError("no paired source/target slices in the training manifests")
    runlog = RunLog("pretrain", cfg.seed, digest_override or config_digest(model_cfg.to_dict(), cfg))
    if resume is not None:
        state, model_cfg, history = restore_pretrain_state(resume, cfg)
        runlog.steps = history
    else:
        state = new_pretrain_state(model_cfg, cfg)
    per_epoch = math.ceil(len(pairs) / cfg.batch)
    total = per_epoch * cfg.epochs if max_steps is None else min(per_epoch * cfg.epochs, max_steps)
    while state.step < total:
        epoch, b = divmod(state.step, per_epoch)
        order = _epoch_order(len(pairs), cfg.seed, epoch)
        chunk = [pairs[i] for i in order[b * cfg.batch:(b + 1) * cfg.batch]]
        rec = pretrain_step(state, pair_stack(chunk, cfg.sequences), cfg)
        runlog.steps.append(rec)
        if b == per_epoch - 1:
            log.info("pretrain epoch %d step %d total %.4f l_pix %.4f", epoch + 1, state.step,
                     rec["total"], rec["l_pix"])
            if progress:
                progress({"epoch": epoch + 1, **rec})
        if checkpoint_dir and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"pretrain_step{state.step:07d}.ckpt",
                            pretrain_checkpoint(state, model_cfg, cfg, runlog))
    report = None
    if test is not None:
        test_pairs = pair_records(*test)
        if test_pairs:
            report = evaluate_synthesis(state.generator, test_pairs, cfg)
            runlog.epochs.append({"step": state.step, "synthesis": report.summary()})
    return pretrain_checkpoint(state, model_cfg, cfg, runlog), runlog, report


# ---------------------------------------------------------------- stage 2

def labels_of(records: Sequence[SliceRecord], classes: Sequence[str]) -> Tensor:
    bad = sorted({r.class_label for r in records} - set(classes))
    if bad:
        raise ValueError(f"labels {bad} are outside the configured class set {list(classes)}")
    return torch.tensor([list(classes).index(r.class_label) for r in records])


def freeze(model: torch.nn.Module, groups: Sequence[str]) -> None:
    for name, p in model.named_parameters():
        if any(name == g or name.startswith(g + ".") for g in groups):
            p.requires_grad_(False)


@dataclass
class FinetuneState:
    classifier: Classifier
    opt: torch.optim.Optimizer | None
    step: int = 0


def new_finetune_state(model_cfg: ModelConfig, cfg: FinetuneConfig,
                       init: Checkpoint | None = None) -> FinetuneState:
    """Fresh classifier (seeded), optionally overwritten by encoder+ART weights from ``init``."""
    torch.manual_seed(cfg.seed)
    if model_cfg.n_classes != len(cfg.classes):
        model_cfg = ModelConfig.from_dict({**model_cfg.to_dict(), "n_classes": len(cfg.classes)})
    c = Classifier(model_cfg)
    if init is not None:
        report = transfer_weights(init.tensors, c)
        log.info("transferred %d tensors, skipped %d, fresh %d", *report.counts().values())
    freeze(c, cfg.freeze_groups)
    params = [p for p in c.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, cfg.lr, (cfg.beta1, cfg.beta2)) if params else None
    return FinetuneState(c, opt)


def finetune_step(state: FinetuneState, x: Tensor, y: Tensor, cfg: FinetuneConfig) -> dict[str, float]:
    c = state.classifier
    c.train()
    _step_seed(cfg.seed, state.step)
    loss = losses.cross_entropy_logits(c.logits(x), y)
    _check_finite({"loss": loss}, state.step, {"phase": "finetune"})
    if state.opt is not None:
        state.opt.zero_grad(set_to_none=True)
        loss.backward()
        state.opt.step()
    state.step += 1
    return {"step": state.step, "loss": loss.item()}


@torch.no_grad()
def predict(classifier: Classifier, records: Sequence[SliceRecord], slots=SEQUENCES,
            batch: int = 32) -> np.ndarray:
    classifier.eval()
    out = []
    for i in range(0, len(records), batch):
        out.append(classifier(slot_input(records[i:i + batch], slots)).argmax(1).numpy())
    return np.concatenate(out)


def evaluate_classifier(classifier: Classifier, records: Sequence[SliceRecord],
                        cfg: FinetuneConfig) -> ClassificationReport:
    y = labels_of(records, cfg.classes).numpy()
    return classification_report(y, predict(classifier, records, cfg.sequences), len(cfg.classes),
                                 cfg.classes)


def finetune_checkpoint(state: FinetuneState, cfg: FinetuneConfig, runlog: RunLog,
                        extra: dict[str, Any] | None = None) -> Checkpoint:
    c = state.classifier
    tensors = module_tensors(model=c)
    if state.opt is not None:
        names = [n for n, p in c.named_parameters() if p.requires_grad]
        tensors.update(optimizer_tensors(state.opt, names, "c"))
    manifest = {
        "kind": "classifier", "model": c.cfg.to_dict(), "finetune": asdict(cfg),
        "step": state.step, "seed": cfg.seed, "config_digest": runlog.config_digest,
        "loss_digest": digest([s["loss"] for s in runlog.steps]), "losses": runlog.steps,
        **(extra or {}),
    }
    return Checkpoint(tensors, manifest)


def restore_finetune_state(ckpt: Checkpoint, cfg: FinetuneConfig) -> FinetuneState:
    model_cfg = ModelConfig.from_dict(ckpt.manifest["model"])
    state = new_finetune_state(model_cfg, cfg)
    load_state_strict(state.classifier, {k: v for k, v in ckpt.tensors.items()
                                         if not k.startswith("optim.")}, "classifier")
    if state.opt is not None:
        names = [n for n, p in state.classifier.named_parameters() if p.requires_grad]
        restore_optimizer(state.opt, names, "c", ckpt)
    state.step = int(ckpt.manifest["step"])
    return state


def run_finetune(train: DatasetManifest, test: DatasetManifest | None, model_cfg: ModelConfig,
                 cfg: FinetuneConfig, *, init: Checkpoint | None = None, resume: Checkpoint | None = None,
                 max_steps: int | None = None, eval_every_epoch: bool = True,
                 digest_override: str | None = None, progress: Callable[[dict], None] | None = None,
                 ) -> tuple[Checkpoint, RunLog, ClassificationReport | None]:
    """Train the classifier; returns the best-test-accuracy checkpoint (last one without a test set)."""
    records = list(train.records)
    if not records:
        raise ValueError("empty training manifest")
    y_all = labels_of(records, cfg.classes)
    if test is not None:
        labels_of(test.records, cfg.classes)
    runlog = RunLog("finetune", cfg.seed, digest_override or config_digest(model_cfg.to_dict(), cfg))
    if resume is not None:
        state = restore_finetune_state(resume, cfg)
        runlog.steps = list(resume.manifest.get("losses", []))
    else:
        state = new_finetune_state(model_cfg, cfg, init)
    x_all = slot_input(records, cfg.sequences)
    per_epoch = math.ceil(len(records) / cfg.batch)
    total = per_epoch * cfg.epochs if max_steps is None else min(per_epoch * cfg.epochs, max_steps)
    best: tuple[float, Checkpoint, ClassificationReport] | None = None
    while state.step < total:
        epoch, b = divmod(state.step, per_epoch)
        idx = torch.from_numpy(_epoch_order(len(records), cfg.seed, epoch)[b * cfg.batch:(b + 1) * cfg.batch])
        rec = finetune_step(state, x_all[idx], y_all[idx], cfg)
        rec["epoch"] = epoch + 1
        runlog.steps.append(rec)
        if b == per_epoch - 1 and progress and (test is None or not eval_every_epoch):
            progress(dict(rec))
        if b == per_epoch - 1 and test is not None and eval_every_epoch:
            report = evaluate_classifier(state.classifier, test.records, cfg)
            runlog.epochs.append({"epoch": epoch + 1, "step": state.step, **report.to_dict()})
            log.info("finetune epoch %d loss %.4f test acc %.4f", epoch + 1, rec["loss"], report.accuracy)
            if progress:
                progress({**rec, "test_accuracy": report.accuracy})
            if best is None or report.accuracy > best[0]:
                best = (report.accuracy, finetune_checkpoint(state, cfg, runlog, {"best_epoch": epoch + 1}),
                        report)
    final = finetune_checkpoint(state, cfg, runlog)
    if test is None:
        return final, runlog, None
    if best is None:
        report = evaluate_classifier(state.classifier, test.records, cfg)
        return final, runlog, report
    return best[1], runlog, best[2]


def classifier_from_checkpoint(ckpt: Checkpoint) -> Classifier:
    c = Classifier(ModelConfig.from_dict(ckpt.manifest["model"]))
    load_state_strict(c, {k: v for k, v in ckpt.tensors.items() if not k.startswith("optim.")}, "classifier")
    return c


def generator_from_checkpoint(ckpt: Checkpoint) -> Generator:
    g = Generator(ModelConfig.from_dict(ckpt.manifest["model"]))
    load_state_strict(g, {k: v for k, v in ckpt.tensors.items() if not k.startswith(("disc.", "optim."))},
                      "generator")
    return g


def snapshot(module: torch.nn.Module) -> dict[str, Tensor]:
    return {k: v.detach().clone() for k, v in copy.deepcopy(module.state_dict()).items()}
