"""Synthetic multi-sequence brain phantoms with planted tumor masks.

Used for desk-scale runs and tests: every case has an ellipsoidal "brain"
with smooth tissue texture, ventricles, and (for tumor classes) an
ellipsoidal lesion whose contrast differs per sequence.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import SEQUENCES, DatasetManifest, SliceRecord, VolumeRecord

# tissue intensities per sequence: (brain, csf, lesion)
CONTRAST = {
    "T1": (0.75, 0.15, 0.35),
    "T2": (0.40, 0.95, 0.80),
    "FLAIR": (0.45, 0.10, 0.90),
}
LESION_SHAPE = {"glioma": (0.22, 0.16), "meningioma": (0.14, 0.14), "pituitary": (0.08, 0.06)}


def _grid(shape):
    return np.meshgrid(*[np.linspace(-1, 1, n) for n in shape], indexing="ij")


def phantom_case(case_id: str, class_label: str, shape=(32, 32, 16), seed: int = 0,
                 sequences=SEQUENCES) -> list[VolumeRecord]:
    """One case: a volume per sequence sharing anatomy and segmentation."""
    rng = np.random.default_rng(seed)
    x, y, z = _grid(shape)
    brain = (x / 0.85) ** 2 + (y / 0.75) ** 2 + (z / 0.95) ** 2 <= 1
    vent = ((x / 0.18) ** 2 + ((y - 0.05) / 0.3) ** 2 + (z / 0.5) ** 2 <= 1) & brain
    tex = gaussian_filter(rng.standard_normal(shape), 1.5)
    tex = tex / (np.abs(tex).max() + 1e-9)
    seg = np.zeros(shape, dtype=np.int64)
    if class_label != "no_tumor":
        rx, rz = LESION_SHAPE[class_label]
        c = rng.uniform(-0.35, 0.35, size=2)
        cz = rng.uniform(0.3, 0.55) * rng.choice([-1, 1])
        lesion = ((x - c[0]) / rx) ** 2 + ((y - c[1]) / rx) ** 2 + ((z - cz) / rz) ** 2 <= 1
        core = ((x - c[0]) / (0.5 * rx)) ** 2 + ((y - c[1]) / (0.5 * rx)) ** 2 + ((z - cz) / (0.5 * rz)) ** 2 <= 1
        seg[lesion & brain] = 2
        seg[core & brain] = 1
    out = []
    for seq in sequences:
        b, csf, les = CONTRAST[seq]
        vol = np.where(brain, b + 0.1 * tex, 0.0)
        vol = np.where(vent, csf, vol)
        vol = np.where(seg > 0, les + 0.05 * tex, vol)
        vol = vol + 0.01 * rng.standard_normal(shape)
        out.append(VolumeRecord(case_id, seq, vol.astype(np.float32), class_label,
                                seg if class_label != "no_tumor" else None))
    return out


def phantom_slice(class_label: str, size: int = 32, seed: int = 0,
                  sequences=SEQUENCES) -> dict[str, np.ndarray]:
    """One 2D slice per sequence in [-1, 1]; lesion size and placement depend on the class."""
    rng = np.random.default_rng(seed)
    x, y = _grid((size, size))
    brain = (x / 0.85) ** 2 + (y / 0.75) ** 2 <= 1
    vent = (x / 0.18) ** 2 + ((y - 0.05) / 0.3) ** 2 <= 1
    tex = gaussian_filter(rng.standard_normal((size, size)), 1.5)
    tex = tex / (np.abs(tex).max() + 1e-9)
    lesion = np.zeros((size, size), dtype=bool)
    if class_label == "glioma":
        c = rng.uniform(-0.3, 0.3, 2) + np.array([0.0, 0.35 * rng.choice([-1, 1])])
        lesion = ((x - c[0]) / 0.3) ** 2 + ((y - c[1]) / 0.25) ** 2 <= 1
    elif class_label == "meningioma":
        ang = rng.uniform(0, 2 * np.pi)
        c = (0.7 * np.cos(ang), 0.62 * np.sin(ang))
        lesion = ((x - c[0]) / 0.16) ** 2 + ((y - c[1]) / 0.16) ** 2 <= 1
    elif class_label == "pituitary":
        c = (0.55 + rng.uniform(-0.05, 0.05), rng.uniform(-0.08, 0.08))
        lesion = ((x - c[0]) / 0.1) ** 2 + ((y - c[1]) / 0.12) ** 2 <= 1
    elif class_label != "no_tumor":
        raise ValueError(f"unknown class {class_label!r}")
    lesion &= brain
    out = {}
    for seq in sequences:
        b, csf, les = CONTRAST[seq]
        img = np.where(brain, b + 0.1 * tex, 0.0)
        img = np.where(vent & brain, csf, img)
        img = np.where(lesion, les + 0.05 * tex, img)
        img = img + 0.01 * rng.standard_normal((size, size))
        lo, hi = img.min(), img.max()
        out[seq] = ((img - lo) / (hi - lo) * 2 - 1).astype(np.float32)
    return out


def toy_pairs(n: int, size: int = 32, source: str = "T1", target: str = "T2", seed: int = 0,
              classes=("glioma", "meningioma", "no_tumor", "pituitary")):
    """Paired source/target training manifests of ``n`` phantom slices (classes cycled)."""
    src, tgt = [], []
    for i in range(n):
        cls = classes[i % len(classes)]
        s = phantom_slice(cls, size, seed=seed * 100003 + i, sequences=(source, target))
        src.append(SliceRecord(f"toy{i:03d}", source, s[source], cls, slice_index=0))
        tgt.append(SliceRecord(f"toy{i:03d}", target, s[target], cls, slice_index=0))
    return DatasetManifest("toy", "train", src), DatasetManifest("toy", "train", tgt)


def toy_classification(per_class: int, size: int = 32, sequence: str = "T1", seed: int = 0,
                       classes=("no_tumor", "glioma", "meningioma", "pituitary"), split: str = "train"):
    """Labelled phantom slices, ``per_class`` of each class, in one sequence."""
    recs = []
    for ci, cls in enumerate(classes):
        for j in range(per_class):
            s = phantom_slice(cls, size, seed=seed * 100003 + ci * 1000 + j, sequences=(sequence,))
            recs.append(SliceRecord(f"{cls}{j:03d}", sequence, s[sequence], cls, slice_index=0))
    return DatasetManifest("toy", split, recs)
