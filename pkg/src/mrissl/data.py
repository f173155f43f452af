"""MRI volume ingestion, slice selection, normalization, splitting, and augmentation.

Volume container: ``<stem>.raw`` holds little-endian float32 voxels in C order
for shape ``[X, Y, Z]`` (axial index last); ``<stem>.json`` is the sidecar
``{case_id, sequence, shape, seg_path?, class_label}``. ``seg_path`` is
relative to the sidecar and uses the same raw float32 layout.
"""

from __future__ import annotations

import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

SEQUENCES = ("T1", "T2", "FLAIR")
CLASSES = ("no_tumor", "glioma", "meningioma", "pituitary")
VOLUME_CLASSES = ("no_tumor", "glioma", "meningioma")
TUMOR_CLASSES = frozenset({"glioma", "meningioma"})
PROVENANCE = ("real", "synthetic")
SLICE_SIZE = 256


class DataError(ValueError):
    """Malformed or insufficient input data."""


@dataclass
class VolumeRecord:
    case_id: str
    sequence: str
    voxels: np.ndarray
    class_label: str
    seg: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.sequence not in SEQUENCES:
            raise DataError(f"{self.case_id}: unknown sequence {self.sequence!r}")
        if self.class_label not in VOLUME_CLASSES:
            raise DataError(f"{self.case_id}: unknown volume class {self.class_label!r}")
        if self.voxels.ndim != 3 or self.voxels.shape[2] < 1:
            raise DataError(f"{self.case_id}: voxels must be (X, Y, Z) with Z >= 1, got {self.voxels.shape}")
        if self.seg is not None:
            if self.seg.shape != self.voxels.shape:
                raise DataError(f"{self.case_id}: seg shape {self.seg.shape} != voxels {self.voxels.shape}")
            if (self.seg < 0).any() or not np.array_equal(self.seg, np.round(self.seg)):
                raise DataError(f"{self.case_id}: seg labels must be nonnegative integers")


@dataclass
class SliceRecord:
    case_id: str
    sequence: str
    pixels: np.ndarray
    class_label: str
    provenance: str = "real"
    slice_index: int | None = None

    def __post_init__(self) -> None:
        if self.sequence not in SEQUENCES:
            raise DataError(f"{self.case_id}: unknown sequence {self.sequence!r}")
        if self.class_label not in CLASSES:
            raise DataError(f"{self.case_id}: unknown class {self.class_label!r}")
        if self.provenance not in PROVENANCE:
            raise DataError(f"{self.case_id}: unknown provenance {self.provenance!r}")
        p = self.pixels
        if p.ndim != 2 or p.shape[0] != p.shape[1]:
            raise DataError(f"{self.case_id}: pixels must be a square 2D array, got {p.shape}")
        if not np.isfinite(p).all() or p.min() < -1 or p.max() > 1:
            raise DataError(f"{self.case_id}: pixels must be finite and within [-1, 1]")

    @property
    def key(self) -> str:
        z = "na" if self.slice_index is None else str(self.slice_index)
        return f"{self.case_id}_{self.sequence}_{z}_{self.class_label}_{self.provenance}"

    @property
    def pair_key(self) -> tuple:
        """Identity shared by the same anatomy across sequences."""
        return (self.case_id, self.slice_index, self.class_label)


@dataclass
class DatasetManifest:
    name: str
    split: str
    records: list[SliceRecord] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.split not in ("train", "test"):
            raise DataError(f"split must be 'train' or 'test', got {self.split!r}")

    @property
    def per_class_counts(self) -> dict[str, int]:
        c = Counter(r.class_label for r in self.records)
        return {k: c[k] for k in CLASSES if c[k]}

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, sequence: str | None = None, provenance: str | None = None) -> "DatasetManifest":
        recs = [r for r in self.records
                if (sequence is None or r.sequence == sequence)
                and (provenance is None or r.provenance == provenance)]
        return DatasetManifest(self.name, self.split, recs)


# ---------------------------------------------------------------- slice selection

def tumor_coverage(seg: np.ndarray) -> np.ndarray:
    """Nonzero-voxel count of every axial slice (last axis)."""
    seg = np.asarray(seg)
    if seg.size == 0:
        raise DataError("empty volume")
    if seg.ndim != 3:
        raise DataError(f"seg must be 3D, got shape {seg.shape}")
    return np.count_nonzero(seg, axis=(0, 1)).astype(np.int64)


def _coverage(volume: VolumeRecord) -> np.ndarray:
    if volume.seg is None:
        return np.zeros(volume.voxels.shape[2], dtype=np.int64)
    return tumor_coverage(volume.seg)


def select_tumor_slices(volume: VolumeRecord, k: int) -> list[int]:
    """The k slices with the largest coverage; ties go to the lower index."""
    cov = _coverage(volume)
    positive = int((cov > 0).sum())
    if positive < k:
        raise DataError(
            f"case {volume.case_id}: needs {k} tumor slices but only {positive} have tumor coverage"
        )
    order = sorted(range(len(cov)), key=lambda z: (-cov[z], z))
    return order[:k]


def select_healthy_slices(volume: VolumeRecord, k: int) -> list[int]:
    """The k tumor-free slices closest to floor(Z/2); ties go to the lower index."""
    cov = _coverage(volume)
    centre = len(cov) // 2
    healthy = [z for z in range(len(cov)) if cov[z] == 0]
    if len(healthy) < k:
        raise DataError(
            f"case {volume.case_id}: needs {k} healthy slices but only {len(healthy)} are tumor-free"
        )
    return sorted(healthy, key=lambda z: (abs(z - centre), z))[:k]


def normalize_slice(raw: np.ndarray, size: int = SLICE_SIZE) -> np.ndarray:
    """Bilinear resize to size x size, then per-slice min-max scaling to [-1, 1]."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or min(raw.shape) < 1:
        raise DataError(f"slice must be a non-empty 2D array, got shape {raw.shape}")
    if not np.isfinite(raw).all():
        raise DataError("slice contains NaN or Inf")
    if raw.shape != (size, size):
        t = torch.from_numpy(raw)[None, None]
        raw = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)[0, 0].numpy()
    lo, hi = raw.min(), raw.max()
    if hi <= lo:
        return np.full((size, size), -1.0, dtype=np.float32)
    out = (raw - lo) / (hi - lo) * 2.0 - 1.0
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def extract_case(volumes: Sequence[VolumeRecord], tumor_k: int, healthy_k: int,
                 size: int = SLICE_SIZE) -> list[SliceRecord]:
    """Slice every sequence of one case at the selected axial indices.

    Tumor cases yield ``tumor_k`` slices labelled with the case class and
    ``healthy_k`` tumor-free slices labelled ``no_tumor``; tumor-free cases
    yield ``healthy_k`` slices only.
    """
    if not volumes:
        raise DataError("no volumes for case")
    case_id = volumes[0].case_id
    seg_src = next((v for v in volumes if v.seg is not None), volumes[0])
    label = seg_src.class_label
    picks: list[tuple[int, str]] = []
    if label in TUMOR_CLASSES:
        if seg_src.seg is None:
            raise DataError(f"case {case_id}: tumor class {label!r} but no segmentation")
        picks += [(z, label) for z in select_tumor_slices(seg_src, tumor_k)]
    picks += [(z, "no_tumor") for z in select_healthy_slices(seg_src, healthy_k)]
    out = []
    for vol in sorted(volumes, key=lambda v: SEQUENCES.index(v.sequence)):
        if vol.voxels.shape != seg_src.voxels.shape:
            raise DataError(f"case {case_id}: {vol.sequence} shape differs from segmentation")
        for z, cls in picks:
            out.append(SliceRecord(case_id, vol.sequence, normalize_slice(vol.voxels[:, :, z], size),
                                   cls, "real", z))
    return out


# ---------------------------------------------------------------- splitting

def _sort_key(r: SliceRecord) -> tuple:
    return (r.case_id, -1 if r.slice_index is None else r.slice_index, r.provenance, r.sequence)


def split_dataset(records: Iterable[SliceRecord], train_fraction: float, seed: int,
                  name: str = "dataset") -> tuple[DatasetManifest, DatasetManifest]:
    """Seeded, per-class stratified split.

    Records are sorted canonically before shuffling, so the result does not
    depend on input order. The sequence is only the last tie-breaker, so
    single-sequence manifests built from the same slices split identically.
    Each class keeps round(fraction * n) training records, clamped so both
    sides are non-empty.
    """
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    by_class: dict[str, list[SliceRecord]] = defaultdict(list)
    for r in records:
        by_class[r.class_label].append(r)
    small = {c: len(v) for c, v in by_class.items() if len(v) < 2}
    if small:
        raise DataError(f"classes with fewer than 2 records cannot be split: {small}")
    train, test = [], []
    for ci, cls in enumerate(CLASSES):
        group = sorted(by_class.get(cls, []), key=_sort_key)
        if not group:
            continue
        rng = np.random.default_rng([seed, ci])
        perm = rng.permutation(len(group))
        n_train = min(max(int(np.floor(train_fraction * len(group) + 0.5)), 1), len(group) - 1)
        train += [group[i] for i in sorted(perm[:n_train])]
        test += [group[i] for i in sorted(perm[n_train:])]
    return DatasetManifest(name, "train", train), DatasetManifest(name, "test", test)


# ---------------------------------------------------------------- augmentation

Synthesizer = Callable[[np.ndarray], np.ndarray]


class GeneratorSynthesizer:
    """Wrap a trained generator as a source-slice -> target-slice function.

    The source slice is placed in its sequence slot of the generator input;
    the other slots are zero. The output is read from the target slot.
    """

    def __init__(self, generator: torch.nn.Module, source: str, target: str,
                 slots: Sequence[str] = SEQUENCES, batch_size: int = 16):
        self.generator = generator
        self.source, self.target = source, target
        self.slots = list(slots)
        self.src_idx = self.slots.index(source)
        self.tgt_idx = self.slots.index(target)
        self.batch_size = batch_size

    @torch.no_grad()
    def batch(self, sources: Sequence[np.ndarray]) -> list[np.ndarray]:
        self.generator.eval()
        dtype = next(self.generator.parameters()).dtype
        out = []
        for i in range(0, len(sources), self.batch_size):
            chunk = np.stack(sources[i:i + self.batch_size])
            x = torch.zeros(len(chunk), len(self.slots), *chunk.shape[1:], dtype=dtype)
            x[:, self.src_idx] = torch.from_numpy(chunk).to(dtype)
            y = self.generator(x)[:, self.tgt_idx]
            out += [np.clip(s.numpy().astype(np.float32), -1, 1) for s in y]
        return out

    def __call__(self, source: np.ndarray) -> np.ndarray:
        return self.batch([source])[0]


def build_augmented(train: DatasetManifest, synthesizer: Synthesizer | GeneratorSynthesizer,
                    tumor_classes: Iterable[str], sources: Iterable[SliceRecord] = ()) -> DatasetManifest:
    """Append one synthetic slice per tumor-class record, translated from its paired source slice.

    ``sources`` holds the source-sequence slices; a record is paired with the
    source slice sharing its case, slice index, and class. Real records are
    passed through untouched. Test manifests are rejected.
    """
    tumor_classes = set(tumor_classes)
    if not tumor_classes <= TUMOR_CLASSES:
        raise ValueError(f"tumor_classes must be a subset of {sorted(TUMOR_CLASSES)}")
    if train.split != "train":
        raise ValueError("augmentation applies to training manifests only")
    if not tumor_classes:
        return DatasetManifest(train.name, train.split, list(train.records))
    lookup = {s.pair_key: s for s in sources}
    wanted = [r for r in train.records if r.class_label in tumor_classes and r.provenance == "real"]
    missing = sorted({r.case_id for r in wanted if r.pair_key not in lookup})
    if missing:
        raise DataError(f"missing paired source slice for cases: {', '.join(missing)}")
    src = [lookup[r.pair_key].pixels for r in wanted]
    if isinstance(synthesizer, GeneratorSynthesizer):
        synth = synthesizer.batch(src)
    else:
        synth = [np.asarray(synthesizer(s), dtype=np.float32) for s in src]
    extra = [
        SliceRecord(r.case_id, r.sequence, np.clip(p, -1, 1).astype(np.float32), r.class_label,
                    "synthetic", r.slice_index)
        for r, p in zip(wanted, synth)
    ]
    return DatasetManifest(f"{train.name}-augmented", "train", list(train.records) + extra)


# ---------------------------------------------------------------- file formats

def write_volume(stem: str | Path, volume: VolumeRecord) -> Path:
    """Write ``<stem>.raw`` (+ ``<stem>_seg.raw``) and the ``<stem>.json`` sidecar."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    volume.voxels.astype("<f4").tofile(stem.with_suffix(".raw"))
    side = {"case_id": volume.case_id, "sequence": volume.sequence,
            "shape": list(volume.voxels.shape), "class_label": volume.class_label}
    if volume.seg is not None:
        seg_path = stem.parent / f"{stem.name}_seg.raw"
        volume.seg.astype("<f4").tofile(seg_path)
        side["seg_path"] = seg_path.name
    sidecar = stem.with_suffix(".json")
    sidecar.write_text(json.dumps(side, indent=2))
    return sidecar


def _read_raw(path: Path, shape: tuple[int, ...], sidecar: Path) -> np.ndarray:
    if not path.exists():
        raise DataError(f"{sidecar}: referenced file {path.name} not found")
    arr = np.fromfile(path, dtype="<f4")
    if arr.size != int(np.prod(shape)):
        raise DataError(f"{sidecar}: {path.name} holds {arr.size} values, shape {list(shape)} needs {int(np.prod(shape))}")
    return arr.reshape(shape).astype(np.float32)


def read_volume(sidecar: str | Path) -> VolumeRecord:
    sidecar = Path(sidecar)
    try:
        meta = json.loads(sidecar.read_text())
        case_id, sequence, class_label = meta["case_id"], meta["sequence"], meta["class_label"]
        shape = tuple(int(s) for s in meta["shape"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{sidecar}: malformed sidecar ({exc.__class__.__name__}: {exc})") from None
    unknown = set(meta) - {"case_id", "sequence", "shape", "seg_path", "class_label"}
    if unknown:
        raise DataError(f"{sidecar}: unknown sidecar fields {sorted(unknown)}")
    if len(shape) != 3:
        raise DataError(f"{sidecar}: shape must have three entries")
    voxels = _read_raw(sidecar.with_suffix(".raw"), shape, sidecar)
    seg = None
    if meta.get("seg_path"):
        seg = _read_raw(sidecar.parent / meta["seg_path"], shape, sidecar).astype(np.int64)
    try:
        return VolumeRecord(case_id, sequence, voxels, class_label, seg)
    except DataError as exc:
        raise DataError(f"{sidecar}: {exc}") from None


def read_volume_dir(root: str | Path) -> dict[str, list[VolumeRecord]]:
    """All volumes under ``root`` grouped by case id (sorted)."""
    groups: dict[str, list[VolumeRecord]] = defaultdict(list)
    for sidecar in sorted(Path(root).glob("**/*.json")):
        vol = read_volume(sidecar)
        groups[vol.case_id].append(vol)
    return dict(sorted(groups.items()))


def save_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    """Write the manifest JSON and one float32 container per record next to it."""
    path = Path(path)
    blob_dir = path.parent / f"{path.stem}_slices"
    blob_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for r in manifest.records:
        blob = blob_dir / f"{r.key}.f32"
        r.pixels.astype("<f4").tofile(blob)
        entries.append({
            "case_id": r.case_id, "sequence": r.sequence, "class_label": r.class_label,
            "provenance": r.provenance, "slice_index": r.slice_index,
            "shape": list(r.pixels.shape), "path": str(blob.relative_to(path.parent)),
        })
    doc = {"name": manifest.name, "split": manifest.split,
           "per_class_counts": manifest.per_class_counts, "records": entries}
    path.write_text(json.dumps(doc, indent=1))
    return path


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        entries = doc["records"]
        out = DatasetManifest(doc["name"], doc["split"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: unreadable manifest ({exc})") from None
    for e in entries:
        blob = path.parent / e["path"]
        if not blob.exists():
            raise DataError(f"{path}: slice container {e['path']} not found")
        pixels = np.fromfile(blob, dtype="<f4").reshape(e["shape"]).astype(np.float32)
        out.records.append(SliceRecord(e["case_id"], e["sequence"], pixels, e["class_label"],
                                       e["provenance"], e["slice_index"]))
    return out


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    """[-1, 1] -> [0, 255] via round((v + 1) * 127.5)."""
    v = np.clip(np.asarray(pixels, dtype=np.float64), -1, 1)
    return np.floor((v + 1) * 127.5 + 0.5).astype(np.uint8)


def export_png(pixels: np.ndarray, path: str | Path) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(pixels), mode="L").save(path)


def count_table(manifests: Mapping[str, Mapping[str, DatasetManifest]]) -> str:
    """Per-class train/test counts, one column per dataset (rows as classes x subsets)."""
    names = list(manifests)
    lines = [f"{'classes':<12}{'subset':<8}" + "".join(f"{n:>16}" for n in names)]
    for cls in CLASSES:
        counts = {s: [manifests[n][s].per_class_counts.get(cls) if s in manifests[n] else None
                      for n in names] for s in ("train", "test")}
        if all(c is None for row in counts.values() for c in row):
            continue
        for s in ("train", "test"):
            cells = "".join(f"{('-' if c is None else c):>16}" for c in counts[s])
            lines.append(f"{cls if s == 'train' else '':<12}{s.capitalize():<8}{cells}")
    for s in ("train", "test"):
        cells = "".join(f"{(len(manifests[n][s]) if s in manifests[n] else '-'):>16}" for n in names)
        lines.append(f"{'Total' if s == 'train' else '':<12}{s.capitalize():<8}{cells}")
    return "\n".join(lines)


def slot_input(records: Sequence[SliceRecord], slots: Sequence[str] = SEQUENCES) -> torch.Tensor:
    """Stack slices into (N, len(slots), S, S) with each slice in its sequence slot, zeros elsewhere."""
    slots = list(slots)
    size = records[0].pixels.shape
    x = torch.zeros(len(records), len(slots), *size)
    for i, r in enumerate(records):
        x[i, slots.index(r.sequence)] = torch.from_numpy(r.pixels)
    return x

