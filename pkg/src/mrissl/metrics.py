"""Synthesis-quality metrics (MSE, PSNR, SSIM) and weighted classification metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import correlate1d

log = logging.getLogger(__name__)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, max_val: float = 1.0) -> float:
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    err = mse(a, b)
    if err == 0:
        raise ValueError("identical images: PSNR is undefined")
    return 10.0 * math.log10(max_val**2 / err)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def ssim(a, b, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all fully-contained Gaussian windows (no padding)."""
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise ValueError(f"ssim expects a 2D grayscale image, got shape {a.shape}")
    if min(a.shape) < win_size:
        raise ValueError(f"image {a.shape} smaller than the {win_size}x{win_size} window")
    g = gaussian_window(win_size, sigma)
    r = win_size // 2

    def filt(x: np.ndarray) -> np.ndarray:
        y = correlate1d(correlate1d(x, g, axis=0, mode="constant"), g, axis=1, mode="constant")
        return y[r:x.shape[0] - r, r:x.shape[1] - r]

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    s_aa = filt(a * a) - mu_a * mu_a
    s_bb = filt(b * b) - mu_b * mu_b
    s_ab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (s_aa + s_bb + c2)
    return float(np.mean(num / den))


def aggregate(values: Sequence[float]) -> tuple[float, float]:
    """Arithmetic mean and population standard deviation."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot aggregate an empty list")
    return float(v.mean()), float(v.std())


@dataclass
class SynthesisReport:
    mse: list[float]
    psnr: list[float]
    ssim: list[float]

    def summary(self) -> dict[str, dict[str, float]]:
        out = {}
        for name in ("psnr", "ssim", "mse"):
            mean, std = aggregate(getattr(self, name))
            out[name] = {"mean": mean, "std": std}
        return out

    def to_dict(self) -> dict:
        return {"n": len(self.mse), "summary": self.summary(),
                "per_image": {"mse": self.mse, "psnr": self.psnr, "ssim": self.ssim}}

    def csv_rows(self) -> list[list]:
        s = self.summary()
        return [["metric", "mean", "std"]] + [[k, v["mean"], v["std"]] for k, v in s.items()]

    def table(self, title: str = "") -> str:
        s = self.summary()
        head = f"{'Task':<16}{'PSNR':>18}{'SSIM':>18}{'MSE':>22}"
        row = f"{title:<16}" + "".join(
            f"{s[k]['mean']:>10.3f}±{s[k]['std']:<7.3f}" for k in ("psnr", "ssim")
        ) + f"{s['mse']['mean']:>13.5f}±{s['mse']['std']:<8.5f}"
        return head + "\n" + row


def synthesis_report(pairs, max_val: float = 1.0, data_range: float | None = None) -> SynthesisReport:
    """Per-image metrics for an iterable of ``(reference, synthetic)`` 2D arrays."""
    rng = max_val if data_range is None else data_range
    m, p, s = [], [], []
    for ref, syn in pairs:
        e = mse(ref, syn)
        m.append(e)
        # identical pair: cap instead of raising so one perfect image does not abort a report
        p.append(psnr(ref, syn, max_val) if e > 0 else float("inf"))
        s.append(ssim(ref, syn, data_range=rng))
    if not m:
        raise ValueError("no image pairs to evaluate")
    return SynthesisReport(m, p, s)


@dataclass
class ClassificationReport:
    confusion: np.ndarray
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_class: dict[str, list[float]] = field(default_factory=dict)
    class_names: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "confusion": self.confusion.tolist(),
            "per_class": self.per_class,
            "class_names": self.class_names,
        }

    def csv_rows(self) -> list[list]:
        return [["accuracy", "precision", "recall", "f1"],
                [self.accuracy, self.precision, self.recall, self.f1]]

    def table(self, title: str = "") -> str:
        head = f"{'Model':<16}{'Accuracy':>10}{'Precision':>11}{'Recall':>9}{'F1':>9}"
        row = (f"{title:<16}{100 * self.accuracy:>10.2f}{100 * self.precision:>11.2f}"
               f"{100 * self.recall:>9.2f}{100 * self.f1:>9.2f}")
        return head + "\n" + row


def confusion_matrix(y_true, y_pred, k: int) -> np.ndarray:
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def classification_report(y_true, y_pred, k: int, class_names: Sequence[str] | None = None) -> ClassificationReport:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise ValueError("empty label vectors")
    if y_true.shape != y_pred.shape:
        raise ValueError(f"length mismatch: {y_true.shape} vs {y_pred.shape}")
    for name, y in (("y_true", y_true), ("y_pred", y_pred)):
        if y.min() < 0 or y.max() >= k:
            raise ValueError(f"{name} has labels outside 0..{k - 1}")
    cm = confusion_matrix(y_true, y_pred, k)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)

    def ratio(num: np.ndarray, den: np.ndarray, what: str) -> np.ndarray:
        out = np.zeros_like(num)
        ok = den > 0
        out[ok] = num[ok] / den[ok]
        if (~ok & (support > 0)).any():
            log.warning("%s undefined for classes %s; counted as 0", what, np.flatnonzero(~ok & (support > 0)).tolist())
        return out

    prec = ratio(tp, predicted, "precision")
    rec = ratio(tp, support, "recall")
    denom = prec + rec
    f1 = np.zeros_like(prec)
    f1[denom > 0] = 2 * prec[denom > 0] * rec[denom > 0] / denom[denom > 0]
    w = support / support.sum()
    return ClassificationReport(
        confusion=cm,
        accuracy=float(tp.sum() / cm.sum()),
        precision=float((w * prec).sum()),
        recall=float((w * rec).sum()),
        f1=float((w * f1).sum()),
        per_class={"precision": prec.tolist(), "recall": rec.tolist(), "f1": f1.tolist(),
                   "support": support.astype(int).tolist()},
        class_names=list(class_names) if class_names else [str(i) for i in range(k)],
    )
