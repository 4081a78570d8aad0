"""Slice-series preprocessing: peripheral trimming, tiny-mask filtering,
intensity normalization, 3-channel replication, and patient-level splits."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data_io import (
    PhantomSpec,
    SliceRecord,
    Volume,
    extract_slices,
    generate_phantom,
    read_svol,
    round_half_away,
    write_svol,
)
from .errors import NonFiniteInput
from .rng import stream_rng

MIN_MASK_PIXELS = 10
DEFAULT_TRIM_PER_END = 0.10  # "outermost 20%" read as a 20% total band
SPLIT_RATIOS = (0.8, 0.1, 0.1)


@dataclass(frozen=True)
class SampleMeta:
    dataset_id: str
    patient_id: str
    slice_index: int
    target_id: int
    target_name: str


@dataclass
class SliceSample:
    """One (image, mask) training pair for a single target id."""

    image: np.ndarray  # (H, W, 3) uint8, all channels identical
    mask: np.ndarray   # (H, W) bool, >= 10 foreground pixels
    meta: SampleMeta

    @property
    def key(self) -> str:
        m = self.meta
        return f"{m.dataset_id}/{m.patient_id}/{m.slice_index:03d}/{m.target_id}"


@dataclass(frozen=True)
class SplitAssignment:
    by_patient: dict[str, str]  # patient_id -> train | val | test
    ratios: tuple[float, float, float]
    seed: int

    def split_of(self, patient_id: str) -> str:
        return self.by_patient[patient_id]


def trim_peripheral(slices: list, fraction_per_end: float = DEFAULT_TRIM_PER_END) -> list:
    """Drop floor(fraction * n) slices from each end, preserving order."""
    if not 0.0 <= fraction_per_end < 0.5:
        raise ValueError(f"fraction_per_end must be in [0, 0.5), got {fraction_per_end}")
    n = len(slices)
    drop = math.floor(fraction_per_end * n)
    return list(slices[drop : n - drop])


def explode_targets_and_filter(label_slice: np.ndarray,
                               min_pixels: int = MIN_MASK_PIXELS,
                               split_components: bool = False) -> list[tuple[int, np.ndarray]]:
    """Per-target binary masks; masks with fewer than min_pixels are dropped.

    One mask per target id by default. With split_components, each
    4-connected component of a target becomes its own mask (off by default:
    prompts are derived from the full per-target mask).
    """
    from scipy.ndimage import label as cc_label

    label_slice = np.asarray(label_slice)
    out = []
    for target_id in np.unique(label_slice):
        if target_id == 0:
            continue
        mask = label_slice == target_id
        if split_components:
            components, count = cc_label(mask)
            pieces = [components == k for k in range(1, count + 1)]
        else:
            pieces = [mask]
        for piece in pieces:
            if int(piece.sum()) >= min_pixels:
                out.append((int(target_id), piece))
    return out


def normalize_to_u8(slice_2d: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 255] integers (halves away from zero), replicated
    into three identical channels. Constant slices map to all zeros."""
    arr = np.asarray(slice_2d, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise NonFiniteInput("slice contains non-finite values")
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        gray = np.zeros(arr.shape, dtype=np.uint8)
    else:
        gray = round_half_away(255.0 * (arr - lo) / (hi - lo)).astype(np.uint8)
    return np.repeat(gray[:, :, None], 3, axis=2)


def split_patients(patient_ids: list[str],
                   ratios: tuple[float, float, float] = SPLIT_RATIOS,
                   seed: int = 0) -> SplitAssignment:
    """Seeded shuffle, then ceil(0.8 n) train / ceil(0.1 n) val / rest test."""
    if not patient_ids:
        raise ValueError("need at least one patient")
    if len(set(patient_ids)) != len(patient_ids):
        raise ValueError("duplicate patient ids")
    shuffled = sorted(patient_ids)
    stream_rng(seed, "patient-split").shuffle(shuffled)
    n = len(shuffled)
    n_train = math.ceil(ratios[0] * n)
    n_val = min(math.ceil(ratios[1] * n), n - n_train)
    assignment = {}
    for i, pid in enumerate(shuffled):
        if i < n_train:
            assignment[pid] = "train"
        elif i < n_train + n_val:
            assignment[pid] = "val"
        else:
            assignment[pid] = "test"
    return SplitAssignment(assignment, ratios, seed)


def samples_from_volume(dataset_id: str, patient_id: str, volume: Volume,
                        labels, trim_fraction: float = DEFAULT_TRIM_PER_END,
                        target_names: dict[int, str] | None = None) -> list[SliceSample]:
    """Full per-volume pipeline: slice, trim, explode targets, normalize."""
    names = target_names if target_names is not None else labels.target_names
    slices: list[SliceRecord] = extract_slices(volume, labels)
    kept = trim_peripheral(slices, trim_fraction)
    samples = []
    for rec in kept:
        image = normalize_to_u8(rec.image)
        for target_id, mask in explode_targets_and_filter(rec.label):
            meta = SampleMeta(dataset_id, patient_id, rec.index, target_id,
                              names.get(target_id, f"target_{target_id}"))
            samples.append(SliceSample(image, mask, meta))
    return samples


def build_phantom_corpus(dataset_specs: dict[str, list[PhantomSpec]],
                         trim_fraction: float = DEFAULT_TRIM_PER_END,
                         split_seed: int = 0) -> tuple[list[SliceSample], SplitAssignment]:
    """Synthesize per-patient phantoms and run them through the pipeline.

    Each PhantomSpec is one "patient"; splits are patient-level.
    """
    samples: list[SliceSample] = []
    patient_ids: list[str] = []
    for dataset_id in sorted(dataset_specs):
        for p_idx, spec in enumerate(dataset_specs[dataset_id]):
            patient_id = f"{dataset_id}-p{p_idx:03d}"
            patient_ids.append(patient_id)
            volume, labels = generate_phantom(spec)
            samples.extend(samples_from_volume(dataset_id, patient_id, volume,
                                               labels, trim_fraction))
    assignment = split_patients(patient_ids, seed=split_seed)
    samples.sort(key=lambda s: s.key)
    return samples, assignment


# --------------------------------------------------------------- persistence

def _payload_base(outdir: Path, key: str, what: str) -> Path:
    return outdir / "payloads" / f"{key.replace('/', '__')}__{what}"


def write_corpus(samples: list[SliceSample], assignment: SplitAssignment,
                 outdir: str | Path) -> Path:
    """Manifest (JSON lines) plus per-sample image/mask payloads in the
    native raw format. Returns the manifest path."""
    outdir = Path(outdir)
    (outdir / "payloads").mkdir(parents=True, exist_ok=True)
    manifest = outdir / "manifest.jsonl"
    with open(manifest, "w") as f:
        for s in sorted(samples, key=lambda s: s.key):
            h, w = s.mask.shape
            write_svol(Volume(s.image[:, :, 0].astype(np.float32)[:, :, None]),
                       _payload_base(outdir, s.key, "img"))
            write_svol(Volume(s.mask.astype(np.float32)[:, :, None]),
                       _payload_base(outdir, s.key, "msk"))
            row = {
                "key": s.key,
                "split": assignment.split_of(s.meta.patient_id),
                "dims": [h, w],
                "mask_pixels": int(s.mask.sum()),
                "dataset_id": s.meta.dataset_id,
                "patient_id": s.meta.patient_id,
                "slice_index": s.meta.slice_index,
                "target_id": s.meta.target_id,
                "target_name": s.meta.target_name,
            }
            f.write(json.dumps(row, sort_keys=True) + "\n")
    meta = {"ratios": list(assignment.ratios), "seed": assignment.seed,
            "by_patient": assignment.by_patient}
    (outdir / "splits.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    return manifest


def read_corpus(outdir: str | Path) -> tuple[list[SliceSample], SplitAssignment, dict[str, str]]:
    """Load a written corpus; returns (samples, assignment, key->split)."""
    outdir = Path(outdir)
    split_meta = json.loads((outdir / "splits.json").read_text())
    assignment = SplitAssignment(split_meta["by_patient"],
                                 tuple(split_meta["ratios"]), split_meta["seed"])
    samples = []
    key_split = {}
    with open(outdir / "manifest.jsonl") as f:
        for line in f:
            row = json.loads(line)
            img = read_svol(_payload_base(outdir, row["key"], "img")).voxels[:, :, 0]
            msk = read_svol(_payload_base(outdir, row["key"], "msk")).voxels[:, :, 0]
            image = np.repeat(round_half_away(img).astype(np.uint8)[:, :, None], 3, axis=2)
            meta = SampleMeta(row["dataset_id"], row["patient_id"],
                              row["slice_index"], row["target_id"], row["target_name"])
            samples.append(SliceSample(image, msk > 0.5, meta))
            key_split[row["key"]] = row["split"]
    samples.sort(key=lambda s: s.key)
    return samples, assignment, key_split


def group_by_dataset(samples: list[SliceSample]) -> dict[str, list[SliceSample]]:
    grouped: dict[str, list[SliceSample]] = {}
    for s in samples:
        grouped.setdefault(s.meta.dataset_id, []).append(s)
    for v in grouped.values():
        v.sort(key=lambda s: s.key)
    return grouped
