"""``mrissl`` command line: ingest, pretrain, synthesize, finetune, evaluate, report.

Hyperparameters come from a JSON experiment config; flags carry paths and
seeds only. Exit codes: 0 success, 2 config error, 3 data error, 4 numeric
failure. Errors are printed to stderr as one JSON line.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import DATA_ROOT_ENV, ConfigError, ExperimentConfig, default_document, load_config
from .data import (DataError, DatasetManifest, GeneratorSynthesizer, build_augmented, count_table, export_png,
                   extract_case, load_manifest, read_volume_dir, save_manifest, slot_input, split_dataset)
from .models import ModelConfig
from .training import (NumericFailure, PretrainConfig, RunLog, classifier_from_checkpoint, evaluate_classifier,
                       evaluate_synthesis, FinetuneConfig, generator_from_checkpoint, pair_records, run_finetune,
                       run_pretrain)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int):
        super().__init__(message)
        self.kind, self.code = kind, code


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would print usage over several lines
        raise CliError("config", f"{self.prog}: {message}", EXIT_CONFIG)


def _out(line: str = "") -> None:
    print(line, flush=True)


def _progress(kind: str):
    def emit(rec: dict) -> None:
        parts = " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items())
        _out(f"progress {kind} {parts}")
    return emit


def _data_path(value: str | None) -> Path | None:
    if value is None:
        return None
    p = Path(value)
    root = os.environ.get(DATA_ROOT_ENV)
    return p if p.is_absolute() or not root or p.exists() else Path(root) / p


def _manifest(path: Path | None, what: str) -> DatasetManifest:
    if path is None:
        raise CliError("config", f"{what} is not set", EXIT_CONFIG)
    if not path.exists():
        raise DataError(f"{what} {path} not found")
    return load_manifest(path)


def _runlog_stem(cfg: ExperimentConfig, out: Path) -> Path:
    if cfg.io.runlog:
        return cfg.path(cfg.io.runlog)
    return out.parent / f"{out.stem}_runlog"


def _write_failure(out: Path, exc: NumericFailure) -> Path:
    path = out.parent / f"{out.stem}_failure.json"
    path.write_text(json.dumps(exc.dump, indent=1, default=str))
    return path


# ---------------------------------------------------------------- commands

def cmd_ingest(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    root = _data_path(args.volumes) if args.volumes else (
        Path(os.environ[DATA_ROOT_ENV]) if os.environ.get(DATA_ROOT_ENV) else None)
    if root is None:
        raise CliError("config", f"--volumes not given and ${DATA_ROOT_ENV} is unset", EXIT_CONFIG)
    if not root.is_dir():
        raise DataError(f"volume directory {root} not found")
    cases = read_volume_dir(root)
    if not cases:
        raise DataError(f"no volume sidecars under {root}")
    records = []
    for vols in cases.values():
        records += extract_case(vols, args.tumor_k, args.healthy_k, cfg.data.slice_size)
    seed = cfg.data.split_seed if args.seed is None else args.seed
    name = args.name or Path(args.out).stem
    train, test = DatasetManifest(name, "train"), DatasetManifest(name, "test")
    # split each sequence with the same seed so a slice keeps all its sequences on one side
    for seq in sorted({r.sequence for r in records}):
        tr, te = split_dataset([r for r in records if r.sequence == seq], cfg.data.train_fraction, seed, name)
        train.records += tr.records
        test.records += te.records
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    paths = [save_manifest(m, out.parent / f"{out.stem}_{m.split}.json") for m in (train, test)]
    _out(count_table({name: {"train": train, "test": test}}))
    for p in paths:
        _out(f"wrote {p}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    pc = cfg.pretrain
    train = _manifest(cfg.path(cfg.data.train_manifest), "data.train_manifest")
    test = cfg.path(cfg.data.test_manifest)
    test_pairs = None
    if test is not None:
        tm = _manifest(test, "data.test_manifest")
        test_pairs = (tm.subset(pc.source, "real"), tm.subset(pc.target, "real"))
    resume = load_checkpoint(args.resume) if args.resume else None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ckdir = cfg.path(cfg.io.checkpoint_dir)
    if ckdir:
        ckdir.mkdir(parents=True, exist_ok=True)
    try:
        ckpt, log, report = run_pretrain(
            train.subset(pc.source, "real"), train.subset(pc.target, "real"), cfg.model, pc, test=test_pairs,
            resume=resume, max_steps=args.max_steps, checkpoint_dir=ckdir, digest_override=cfg.digest,
            progress=_progress("pretrain"))
    except NumericFailure as exc:
        _write_failure(out, exc)
        raise
    ckpt.manifest["experiment"] = cfg.to_dict()
    save_checkpoint(out, ckpt)
    csv_path, _ = log.write(_runlog_stem(cfg, out))
    if report is not None:
        _out(report.table(f"{pc.source}->{pc.target}"))
    _out(f"wrote {out}")
    _out(f"wrote {csv_path}")
    return EXIT_OK


def cmd_synthesize(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    ckpt = load_checkpoint(args.ckpt)
    if ckpt.manifest.get("kind") != "generator":
        raise DataError(f"{args.ckpt} is not a generator checkpoint")
    pc = PretrainConfig(**{k: v for k, v in ckpt.manifest["pretrain"].items()})
    manifest = load_manifest(_data_path(args.manifest))
    sources = manifest.subset(pc.source, "real")
    if not sources.records:
        raise DataError(f"{args.manifest} has no real {pc.source} slices")
    synth = GeneratorSynthesizer(generator_from_checkpoint(ckpt), pc.source, pc.target, pc.sequences)
    images = synth.batch([r.pixels for r in sources.records])
    synthetic = DatasetManifest(
        f"{manifest.name}-synthetic", manifest.split,
        [dataclasses.replace(r, sequence=pc.target, pixels=img, provenance="synthetic")
         for r, img in zip(sources.records, images)])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = [save_manifest(synthetic, out / "synthetic.json")]
    tables = {"original": {manifest.split: manifest.subset(pc.target, "real")}}
    if manifest.split == "train":
        by_id = {id(r.pixels): img for r, img in zip(sources.records, images)}
        aug = build_augmented(manifest.subset(pc.target, "real"), lambda px: by_id[id(px)],
                              cfg.data.tumor_classes, sources.records)
        paths.append(save_manifest(aug, out / "augmented.json"))
        tables["augmented"] = {"train": aug}
    else:
        _out("test manifest: no augmentation manifest written")
    if args.png:
        png_dir = out / "png"
        png_dir.mkdir(exist_ok=True)
        for r in synthetic.records:
            export_png(r.pixels, png_dir / f"{r.key}.png")
    _out(count_table(tables))
    _out(f"synthesized {len(synthetic)} {pc.source}->{pc.target} slices")
    for p in paths:
        _out(f"wrote {p}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    init_arg = args.init if args.init is not None else cfg.finetune.init
    fc = dataclasses.replace(cfg.finetune, init=init_arg)
    seq = cfg.data.sequence
    train = _manifest(cfg.path(cfg.data.train_manifest), "data.train_manifest").subset(seq)
    test_path = cfg.path(cfg.data.test_manifest)
    test = _manifest(test_path, "data.test_manifest").subset(seq) if test_path else None
    init = None
    if init_arg != "fresh":
        init = load_checkpoint(_data_path(init_arg))
        if init.manifest.get("kind") != "generator":
            raise CliError("config", f"--init {init_arg} is not a generator checkpoint", EXIT_CONFIG)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        ckpt, log, report = run_finetune(train, test, cfg.model, fc, init=init, max_steps=args.max_steps,
                                         digest_override=cfg.digest, progress=_progress("finetune"))
    except NumericFailure as exc:
        _write_failure(out, exc)
        raise
    except ValueError as exc:
        if str(exc).startswith("weight transfer failed"):
            raise CliError("config", f"incompatible --init checkpoint: {exc}", EXIT_CONFIG) from None
        raise
    ckpt.manifest["experiment"] = cfg.to_dict()
    save_checkpoint(out, ckpt)
    csv_path, _ = log.write(_runlog_stem(cfg, out))
    if report is not None:
        _out(report.table(seq or "all"))
    _out(f"wrote {out}")
    _out(f"wrote {csv_path}")
    return EXIT_OK


def _write_report(doc: dict, rows: list[list], out: Path | None) -> list[Path]:
    if out is None:
        return []
    out.parent.mkdir(parents=True, exist_ok=True)
    json_path, csv_path = out.with_suffix(".json"), out.with_suffix(".csv")
    json_path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    with open(csv_path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    return [json_path, csv_path]


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    ckpt = load_checkpoint(args.ckpt)
    manifest = load_manifest(_data_path(args.manifest))
    out = Path(args.out) if args.out else None
    written: list[Path] = []
    if args.task == "synth":
        if ckpt.manifest.get("kind") != "generator":
            raise DataError(f"{args.ckpt} is not a generator checkpoint")
        pc = PretrainConfig(**ckpt.manifest["pretrain"])
        pairs = pair_records(manifest.subset(pc.source, "real"), manifest.subset(pc.target, "real"))
        if not pairs:
            raise DataError(f"{args.manifest} has no paired {pc.source}/{pc.target} slices")
        g = generator_from_checkpoint(ckpt)
        report = evaluate_synthesis(g, pairs, pc, cfg.metrics.max_val, cfg.metrics.data_range)
        _out(report.table(f"{pc.source}->{pc.target}"))
        written += _write_report(report.to_dict(), report.csv_rows(), out)
        if out is not None and cfg.io.figures:
            from .plotting import synthesis_panel
            from .losses import availability_mask, masked_input
            from .training import pair_stack
            import torch
            k = min(4, len(pairs))
            m = pair_stack(pairs[:k], pc.sequences)
            with torch.no_grad():
                y = g.eval()(masked_input(m, availability_mask(pc.sequences, [pc.source])))
            t = list(pc.sequences).index(pc.target)
            triples = [(s.pixels, y[i, t].numpy(), tg.pixels) for i, (s, tg) in enumerate(pairs[:k])]
            written.append(synthesis_panel(triples, out.with_name(out.stem + "_samples.png")))
        model, x = g, None
    else:
        if ckpt.manifest.get("kind") != "classifier":
            raise DataError(f"{args.ckpt} is not a classifier checkpoint")
        fc = FinetuneConfig(**ckpt.manifest["finetune"])
        records = manifest.subset(args.sequence).records
        if not records:
            raise DataError(f"{args.manifest} has no records to classify")
        c = classifier_from_checkpoint(ckpt)
        report = evaluate_classifier(c, records, fc)
        _out(report.table(args.sequence or "all"))
        written += _write_report(report.to_dict(), report.csv_rows(), out)
        if out is not None and cfg.io.figures:
            from .plotting import confusion_figure
            written.append(confusion_figure(report.confusion, report.class_names,
                                            out.with_name(out.stem + "_confusion.png")))
        model, x = c, None
    if args.dump_activations:
        from .debug import dump_activations
        import torch
        if args.task == "synth":
            from .losses import availability_mask, masked_input
            from .training import pair_stack
            x = masked_input(pair_stack(pairs[:1], pc.sequences), availability_mask(pc.sequences, [pc.source]))
        else:
            x = slot_input(records[:1], fc.sequences)
        written.append(dump_activations(model, x, args.dump_activations, meta={"ckpt": str(args.ckpt)}))
    for p in written:
        _out(f"wrote {p}")
    return EXIT_OK


def _summary_rows(log: RunLog) -> list[list[Any]]:
    cols = [c for c in log.columns if c not in ("step", "epoch")]
    if log.kind == "finetune" and log.epochs:
        rows = [["epoch", "step", "loss", "accuracy", "precision", "recall", "f1"]]
        by_step = {s["step"]: s for s in log.steps}
        for e in log.epochs:
            rows.append([e["epoch"], e["step"], by_step.get(e["step"], {}).get("loss"),
                         e["accuracy"], e["precision"], e["recall"], e["f1"]])
        return rows
    rows = [["column", "first", "last", "min", "mean_last_10pct"]]
    n = len(log.steps)
    tail = log.steps[max(0, n - max(1, n // 10)):]
    for c in cols:
        vals = [s[c] for s in log.steps]
        rows.append([c, vals[0], vals[-1], min(vals), float(np.mean([s[c] for s in tail]))])
    return rows


def _format_table(rows: list[list[Any]]) -> str:
    cells = [[f"{v:.6g}" if isinstance(v, float) else ("-" if v is None else str(v)) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(cells[0]))]
    return "\n".join("  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in cells)


def cmd_report(args) -> int:
    path = _data_path(args.runlog)
    json_path = path.with_suffix(".json")
    if not json_path.exists():
        raise DataError(f"run log {json_path} not found")
    try:
        log = RunLog.read(json_path)
    except (json.JSONDecodeError, TypeError) as exc:
        raise DataError(f"{json_path}: unreadable run log ({exc})") from None
    if not log.steps:
        raise DataError(f"{json_path}: run log has no steps")
    rows = _summary_rows(log)
    if args.format == "table":
        _out(f"{log.kind} run, seed {log.seed}, config {log.config_digest}, {len(log.steps)} steps")
        _out(_format_table(rows))
        synth = [e["synthesis"] for e in log.epochs if "synthesis" in e]
        if synth:
            s = synth[-1]
            _out("test " + "  ".join(f"{k} {v['mean']:.4f}±{v['std']:.4f}" for k, v in s.items()))
    elif args.format == "json":
        _out(json.dumps({"kind": log.kind, "seed": log.seed, "config_digest": log.config_digest,
                         "n_steps": len(log.steps), "summary": [dict(zip(rows[0], r)) for r in rows[1:]],
                         "epochs": log.epochs}, sort_keys=True))
    else:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(rows)
        sys.stdout.write(buf.getvalue())
    if not args.no_figures:
        from .plotting import confusion_figure, eval_curve, loss_curves
        fig_dir = Path(args.figures) if args.figures else path.parent
        fig_dir.mkdir(parents=True, exist_ok=True)
        stem = path.with_suffix("").name
        figs = [loss_curves(log, fig_dir / f"{stem}_losses.png")]
        if log.kind == "finetune":
            figs.append(eval_curve(log, fig_dir / f"{stem}_accuracy.png"))
            scored = [e for e in log.epochs if "confusion" in e]
            if scored:
                best = max(scored, key=lambda e: e["accuracy"])
                figs.append(confusion_figure(best["confusion"], best.get("class_names") or
                                             [str(i) for i in range(len(best["confusion"]))],
                                             fig_dir / f"{stem}_confusion.png"))
        for f in figs:
            if f is not None:
                print(f"figure {f}", file=sys.stderr)
    return EXIT_OK


def cmd_config(args) -> int:
    if args.check:
        cfg = load_config(args.check)
        _out(json.dumps({"valid": True, "digest": cfg.digest}))
    else:
        _out(json.dumps(default_document(), indent=1, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mrissl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"mrissl {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", help="volumes -> train/test slice manifests")
    s.add_argument("--volumes", help=f"volume directory (default ${DATA_ROOT_ENV})")
    s.add_argument("--out", required=True, help="manifest path; writes <stem>_train.json and <stem>_test.json")
    s.add_argument("--tumor-k", type=int, default=5)
    s.add_argument("--healthy-k", type=int, default=5)
    s.add_argument("--seed", type=int)
    s.add_argument("--name")
    s.add_argument("--config")
    s.set_defaults(fn=cmd_ingest)

    s = sub.add_parser("pretrain", help="stage 1: sequence-to-sequence generator training")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--resume")
    s.add_argument("--max-steps", type=int)
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("synthesize", help="translate a manifest with a generator checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--config")
    s.add_argument("--png", action="store_true", help="also export 8-bit PNGs")
    s.set_defaults(fn=cmd_synthesize)

    s = sub.add_parser("finetune", help="stage 2: classifier training")
    s.add_argument("--config", required=True)
    s.add_argument("--init", help="generator checkpoint or 'fresh' (default: finetune.init)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--max-steps", type=int)
    s.set_defaults(fn=cmd_finetune)

    s = sub.add_parser("evaluate", help="metrics for a checkpoint on a manifest")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--task", choices=("synth", "classify"), required=True)
    s.add_argument("--sequence", help="classify only this sequence's records")
    s.add_argument("--out", help="report stem; writes .json, .csv and a figure")
    s.add_argument("--config")
    s.add_argument("--dump-activations", metavar="DIR")
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("report", help="summarize a run log")
    s.add_argument("--runlog", required=True)
    s.add_argument("--format", choices=("table", "json", "csv"), default="table")
    s.add_argument("--figures", metavar="DIR", help="figure directory (default: next to the run log)")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(fn=cmd_report)

    s = sub.add_parser("config", help="print the default config or validate one")
    s.add_argument("--check", metavar="FILE")
    s.set_defaults(fn=cmd_config)
    return p


def _error_line(kind: str, code: int, message: str) -> str:
    return json.dumps({"error": kind, "code": code, "message": " ".join(str(message).split())})


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except CliError as exc:
        kind, code, msg = exc.kind, exc.code, str(exc)
    except ConfigError as exc:
        kind, code, msg = "config", EXIT_CONFIG, str(exc)
    except (NumericFailure, FloatingPointError) as exc:
        kind, code, msg = "numeric", EXIT_NUMERIC, str(exc)
    except (DataError, CheckpointError, OSError) as exc:
        kind, code, msg = "data", EXIT_DATA, str(exc)
    except ValueError as exc:
        kind, code, msg = "data", EXIT_DATA, str(exc)
    print(_error_line(kind, code, msg), file=sys.stderr, flush=True)
    return code


if __name__ == "__main__":
    sys.exit(main())
