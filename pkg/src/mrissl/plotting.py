"""Matplotlib figures for run logs and evaluation reports (written to files, never shown)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .training import RunLog  # noqa: E402


def loss_curves(runlog: RunLog, path: str | Path) -> Path:
    """One panel per loss column against step; log-scale y when all values are positive."""
    cols = [c for c in runlog.columns if c not in ("step", "epoch")]
    steps = [s["step"] for s in runlog.steps]
    fig, axes = plt.subplots(1, len(cols), figsize=(3.2 * len(cols), 2.8), squeeze=False)
    for ax, col in zip(axes[0], cols):
        vals = np.array([s[col] for s in runlog.steps], dtype=float)
        ax.plot(steps, vals, lw=0.9)
        if len(vals) and (vals > 0).all():
            ax.set_yscale("log")
        ax.set_title(col)
        ax.set_xlabel("step")
        ax.grid(alpha=0.3)
    fig.suptitle(f"{runlog.kind} (seed {runlog.seed}, config {runlog.config_digest})", fontsize=9)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def eval_curve(runlog: RunLog, path: str | Path, key: str = "accuracy") -> Path | None:
    pts = [(e["epoch"], e[key]) for e in runlog.epochs if key in e and "epoch" in e]
    if not pts:
        return None
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(*zip(*pts), marker="o", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel(f"test {key}")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def confusion_figure(confusion, class_names: Sequence[str], path: str | Path) -> Path:
    cm = np.asarray(confusion)
    fig, ax = plt.subplots(figsize=(1.1 * len(cm) + 2, 1.1 * len(cm) + 1.5))
    ax.imshow(cm, cmap="Blues")
    ax.set_xticks(range(len(cm)), class_names, rotation=35, ha="right")
    ax.set_yticks(range(len(cm)), class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    hi = cm.max() if cm.size else 0
    for i in range(len(cm)):
        for j in range(len(cm)):
            ax.text(j, i, int(cm[i, j]), ha="center", va="center",
                    color="white" if hi and cm[i, j] > hi / 2 else "black")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def synthesis_panel(triples: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]], path: str | Path,
                    titles: tuple[str, str, str] = ("source", "synthetic", "target")) -> Path:
    """Rows of (source, synthetic, target) images in [-1, 1]."""
    n = len(triples)
    fig, axes = plt.subplots(n, 3, figsize=(6, 2 * n), squeeze=False)
    for row, imgs in zip(axes, triples):
        for ax, img, title in zip(row, imgs, titles):
            ax.imshow(img, cmap="gray", vmin=-1, vmax=1)
            ax.set_title(title, fontsize=8)
            ax.axis("off")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
