"""Batch evaluation: run checkpoints over splits, aggregate, compare."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .errors import AllZeroDifferences, KeyMismatch
from .metrics import dsc, hausdorff, msd, size_bin, surface_points, wilcoxon_signed_rank
from .model import ImageEmbedding, SamriModel, predict_mask
from .preprocess import SliceSample
from .prompts import BOX_ONLY, synthesize_prompts

METRICS = ("dsc", "hd", "msd")


@dataclass
class EvalRecord:
    key: str
    target_id: int
    size_bin: str
    dsc: float
    hd: float | None
    msd: float | None
    distance_absent_reason: str | None
    regime: str
    model_id: str

    @property
    def dataset_id(self) -> str:
        return self.key.split("/", 1)[0]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def record_for_masks(sample: SliceSample, pred: np.ndarray, regime: str,
                     model_id: str) -> EvalRecord:
    """Metrics for one (prediction, ground truth) pair; distance metrics are
    marked absent (with the reason) instead of crashing the run."""
    score = dsc(pred, sample.mask)
    pred_surface = surface_points(pred)
    gt_surface = surface_points(sample.mask)
    hd_val = msd_val = None
    reason = None
    if len(pred_surface) and len(gt_surface):
        hd_val = hausdorff(pred_surface, gt_surface)
        msd_val = msd(pred_surface, gt_surface)
    else:
        reason = "EmptySurface"
    return EvalRecord(sample.key, sample.meta.target_id,
                      size_bin(sample.mask).value, score, hd_val, msd_val,
                      reason, regime, model_id)


def evaluate_with_predictor(predict_fn, samples: list[SliceSample], regime: str,
                            model_id: str) -> list[EvalRecord]:
    """Evaluation core over any mask predictor (model, oracle stub, ...)."""
    records = []
    for sample in sorted(samples, key=lambda s: s.key):
        prompt_set = synthesize_prompts(sample.mask, regime)  # tight, no jitter
        records.append(record_for_masks(sample, predict_fn(sample, prompt_set),
                                        regime, model_id))
    return records


def evaluate(checkpoint: str | Path | SamriModel, samples: list[SliceSample],
             regime: str = BOX_ONLY, model_id: str | None = None,
             source=None) -> list[EvalRecord]:
    """Evaluate a checkpoint (path) or an in-memory model on samples."""
    if isinstance(checkpoint, (str, Path)):
        model, sidecar = SamriModel.load_checkpoint(checkpoint)
        model_id = model_id or Path(checkpoint).stem
    else:
        model = checkpoint
        model_id = model_id or "in-memory"

    def predict_fn(sample: SliceSample, prompt_set):
        with tc.no_grad():
            if source is not None:
                emb = ImageEmbedding(source.get(sample.key), sample.key)
            else:
                emb = model.encode_image(sample.image, sample.key)
            logits = model.decode(emb, prompt_set)
        return predict_mask(logits.upsampled)

    return evaluate_with_predictor(predict_fn, samples, regime, model_id)


# ------------------------------------------------------------- aggregation

_GROUPERS = {
    "target": lambda r: str(r.target_id),
    "dataset": lambda r: r.dataset_id,
    "size_bin": lambda r: r.size_bin,
}


def _stats(values: list[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    q25, q75 = np.percentile(arr, [25, 75])
    return {"n": len(values), "mean": float(arr.mean()),
            "sd": float(arr.std(ddof=0)), "median": float(np.median(arr)),
            "q25": float(q25), "q75": float(q75)}


def aggregate(records: list[EvalRecord], group_by: str) -> list[dict]:
    """Per-group mean±sd and median(IQR) per metric; absent metrics are
    excluded from their aggregates but counted."""
    if not records:
        raise ValueError("no records to aggregate")
    if group_by not in _GROUPERS:
        raise ValueError(f"group_by must be one of {sorted(_GROUPERS)}")
    grouper = _GROUPERS[group_by]
    groups: dict[str, list[EvalRecord]] = {}
    for r in records:
        groups.setdefault(grouper(r), []).append(r)
    rows = []
    for key in sorted(groups):
        members = groups[key]
        row: dict = {"group": key, "count": len(members)}
        for metric in METRICS:
            values = [getattr(r, metric) for r in members if getattr(r, metric) is not None]
            row[f"{metric}_absent"] = len(members) - len(values)
            if values:
                for stat, val in _stats(values).items():
                    row[f"{metric}_{stat}"] = val
        rows.append(row)
    return rows


def best_counts(records_by_model: dict[str, list[EvalRecord]]) -> dict:
    """Per metric, how often each model is strictly best across sample keys;
    keys where the best value is shared are reported as ties."""
    if not records_by_model:
        raise ValueError("no models to rank")
    indexed = {m: {r.key: r for r in records} for m, records in records_by_model.items()}
    keys = set.intersection(*(set(v) for v in indexed.values()))
    out = {}
    for metric in METRICS:
        higher_is_better = metric == "dsc"
        counts = {m: 0 for m in records_by_model}
        ties = 0
        considered = 0
        for key in sorted(keys):
            values = {m: getattr(indexed[m][key], metric) for m in records_by_model}
            if any(v is None for v in values.values()):
                continue
            considered += 1
            best = max(values.values()) if higher_is_better else min(values.values())
            winners = [m for m, v in values.items() if v == best]
            if len(winners) == 1:
                counts[winners[0]] += 1
            else:
                ties += 1
        out[metric] = {"counts": counts, "ties": ties, "considered": considered}
    return out


def compare(records_a: list[EvalRecord], records_b: list[EvalRecord]) -> dict:
    """Paired per-metric Wilcoxon tests; records are matched by key."""
    by_key_a = {r.key: r for r in records_a}
    by_key_b = {r.key: r for r in records_b}
    if set(by_key_a) != set(by_key_b):
        only_a = sorted(set(by_key_a) - set(by_key_b))[:3]
        only_b = sorted(set(by_key_b) - set(by_key_a))[:3]
        raise KeyMismatch(f"key sets differ (a-only {only_a}, b-only {only_b})")
    out = {}
    for metric in METRICS:
        diffs = []
        n_pairs = 0
        for key in sorted(by_key_a):
            va = getattr(by_key_a[key], metric)
            vb = getattr(by_key_b[key], metric)
            if va is None or vb is None:
                continue
            n_pairs += 1
            diffs.append(va - vb)
        entry = {"pairs": n_pairs, "all_zero": False}
        try:
            result = wilcoxon_signed_rank(diffs)
            entry.update({"w": result.statistic, "p": result.p_value,
                          "n": result.n, "method": result.method})
        except AllZeroDifferences:
            entry.update({"w": 0.0, "p": 1.0, "n": 0, "method": "degenerate",
                          "all_zero": True})
        out[metric] = entry
    return out


# ------------------------------------------------------------ serialization

def write_records_jsonl(records: list[EvalRecord], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w") as f:
        for r in sorted(records, key=lambda r: r.key):
            f.write(r.to_json() + "\n")
    return path


def read_records_jsonl(path: str | Path) -> list[EvalRecord]:
    records = []
    with open(path) as f:
        for line in f:
            records.append(EvalRecord(**json.loads(line)))
    return records


def summary_csv_text(records: list[EvalRecord]) -> str:
    """All three groupings in one deterministic CSV."""
    buf = io.StringIO()
    columns = ["grouping", "group", "count"]
    for metric in METRICS:
        columns += [f"{metric}_absent"] + \
            [f"{metric}_{s}" for s in ("n", "mean", "sd", "median", "q25", "q75")]
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for grouping in ("target", "dataset", "size_bin"):
        for row in aggregate(records, grouping):
            full = {"grouping": grouping}
            for col in columns[1:]:
                val = row.get(col, "")
                full[col] = f"{val:.10g}" if isinstance(val, float) else val
            writer.writerow(full)
    return buf.getvalue()


def write_summary_csv(records: list[EvalRecord], path: str | Path) -> Path:
    path = Path(path)
    path.write_text(summary_csv_text(records))
    return path


def write_comparison_json(comparison: dict | None, path: str | Path) -> Path:
    path = Path(path)
    payload = comparison if comparison is not None else \
        {"baseline": None, "note": "no comparison baseline provided"}
    path.write_text(json.dumps(payload, sort_keys=True, indent=1))
    return path
