"""Stage-2 decoder-only fine-tuning: quota resampling, AdamW, dual-criterion
validation, four-checkpoint retention, and the two-stage efficiency harness."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .bank import CostModel, EmbeddingBank, predicted_times
from .errors import NonFiniteGradient, NonFiniteLoss
from .loss import LossConfig, samri_loss
from .model import ImageEmbedding, ModelConfig, SamriModel
from .preprocess import SliceSample
from .prompts import BOX_ONLY, BOX_POINT, DEFAULT_JITTER, synthesize_prompts
from .rng import stream_rng
from .tensor_core import Parameter

REGIMES = (BOX_ONLY, BOX_POINT)
CRITERIA = ("zero_shot_min", "seen_min")


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3            # paper-scale default is 1e-5 at batch 1024
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.1   # decoupled
    batch: int = 16


@dataclass(frozen=True)
class SamplerConfig:
    quota: int = 64             # paper-scale default is 5000
    seed: int = 0


@dataclass
class EpochPlan:
    per_dataset: dict[str, list[int]]
    order: list[tuple[str, int]]


def plan_epoch(dataset_sizes: dict[str, int], cfg: SamplerConfig,
               epoch: int) -> EpochPlan:
    """Every dataset contributes exactly `quota` samples per epoch.

    Datasets below quota are sampled with replacement; datasets at or above
    quota are subsampled without replacement. The concatenated order is then
    shuffled with a (seed, epoch)-derived stream.
    """
    per_dataset: dict[str, list[int]] = {}
    for ds in sorted(dataset_sizes):
        size = dataset_sizes[ds]
        if size < 1:
            raise ValueError(f"dataset {ds!r} is empty")
        rng = stream_rng(cfg.seed, "sampler", epoch, ds)
        if size < cfg.quota:
            per_dataset[ds] = [rng.randbelow(size) for _ in range(cfg.quota)]
        else:
            per_dataset[ds] = rng.sample_without_replacement(size, cfg.quota)
    order = [(ds, idx) for ds in sorted(per_dataset) for idx in per_dataset[ds]]
    stream_rng(cfg.seed, "sampler-order", epoch).shuffle(order)
    return EpochPlan(per_dataset, order)


# ------------------------------------------------------------------- AdamW

def adamw_step(theta: np.ndarray, grad: np.ndarray, m: np.ndarray,
               v: np.ndarray, cfg: OptimizerConfig,
               t: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One decoupled-decay AdamW update; returns (theta', m', v')."""
    if not np.isfinite(grad).all():
        raise NonFiniteGradient("gradient contains non-finite values")
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
    m_hat = m / (1.0 - cfg.beta1**t)
    v_hat = v / (1.0 - cfg.beta2**t)
    theta = theta - cfg.lr * (m_hat / (np.sqrt(v_hat) + cfg.eps)
                              + cfg.weight_decay * theta)
    return theta, m, v


class AdamW:
    """Optimizer over non-frozen Parameters."""

    def __init__(self, params: list[Parameter], cfg: OptimizerConfig):
        if any(p.frozen for p in params):
            raise ValueError("frozen parameters must not enter the optimizer")
        self.params = params
        self.cfg = cfg
        self.t = 0
        self._m = {p.name: np.zeros_like(p.data) for p in params}
        self._v = {p.name: np.zeros_like(p.data) for p in params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.zero_grad()

    def step(self) -> None:
        self.t += 1
        for p in self.params:
            assert not p.frozen
            grad = p.tensor.grad if p.tensor.grad is not None else np.zeros_like(p.data)
            theta, m, v = adamw_step(p.data, grad, self._m[p.name],
                                     self._v[p.name], self.cfg, self.t)
            p.tensor.data = theta
            self._m[p.name] = m
            self._v[p.name] = v


# ------------------------------------------------------------- checkpoints

@dataclass
class CheckpointSlot:
    regime: str
    criterion: str
    epoch: int = -1
    loss: float = math.inf
    path: str | None = None


class CheckpointSet:
    """Four retention slots: (regime) x (zero-shot min, seen min).

    Each slot holds the strict argmin epoch of its criterion so far; ties
    keep the earliest epoch.
    """

    def __init__(self):
        self.slots = {(r, c): CheckpointSlot(r, c) for r in REGIMES for c in CRITERIA}

    def slot(self, regime: str, criterion: str) -> CheckpointSlot:
        return self.slots[(regime, criterion)]

    def update(self, regime: str, epoch: int, seen_loss: float,
               zero_shot_loss: float, saver=None) -> list[CheckpointSlot]:
        """Feed one epoch's validation losses; returns the slots that improved."""
        improved = []
        for criterion, value in (("seen_min", seen_loss),
                                 ("zero_shot_min", zero_shot_loss)):
            if value is None or not math.isfinite(value):
                continue
            slot = self.slots[(regime, criterion)]
            if value < slot.loss:
                slot.loss = float(value)
                slot.epoch = epoch
                if saver is not None:
                    slot.path = str(saver(slot))
                improved.append(slot)
        return improved

    def summary(self) -> dict:
        return {f"{r}/{c}": {"epoch": s.epoch, "loss": s.loss, "path": s.path}
                for (r, c), s in self.slots.items()}


# -------------------------------------------------------- embedding sources

class BankSource:
    """Serves float32 bank records upcast to float64."""

    def __init__(self, bank: EmbeddingBank):
        self.bank = bank
        self.invocations = 0  # encoding happened once, in Stage 1

    def get(self, key: str) -> np.ndarray:
        return self.bank.lookup(key).astype(np.float64)


class OnTheFlySource:
    """Re-encodes on every request (the per-epoch recompute baseline)."""

    def __init__(self, encoder, images_by_key: dict[str, np.ndarray],
                 downcast_to_f32: bool = True):
        self.encoder = encoder
        self.images = images_by_key
        self.downcast = downcast_to_f32
        self.invocations = 0

    def get(self, key: str) -> np.ndarray:
        self.invocations += 1
        grid = self.encoder.encode(self.images[key], key).grid
        if self.downcast:
            grid = grid.astype(np.float32).astype(np.float64)
        return grid


class InMemorySource:
    """Precomputed embeddings held in memory (bank semantics without a file)."""

    def __init__(self, encoder, images_by_key: dict[str, np.ndarray]):
        self.invocations = 0
        self._grids = {}
        for key in sorted(images_by_key):
            grid = encoder.encode(images_by_key[key], key).grid
            self.invocations += 1
            self._grids[key] = grid.astype(np.float32).astype(np.float64)

    def get(self, key: str) -> np.ndarray:
        return self._grids[key]


def images_by_key(samples: list[SliceSample]) -> dict[str, np.ndarray]:
    return {s.key: s.image for s in samples}


# ------------------------------------------------------------- train loop

@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    val_seen: float
    val_zero_shot: float


@dataclass
class TrainResult:
    history: list[HistoryRow]
    step_losses: list[float]
    checkpoints: CheckpointSet
    regime: str


def _sample_loss(model: SamriModel, sample: SliceSample, grid: np.ndarray,
                 regime: str, loss_cfg: LossConfig, rng, jitter: int):
    prompt_set = synthesize_prompts(sample.mask, regime, rng, jitter)
    logits = model.decode(ImageEmbedding(grid, sample.key), prompt_set)
    probs = tc.sigmoid(logits.upsampled)
    return samri_loss(probs, sample.mask, loss_cfg)


def validation_loss(model: SamriModel, samples: list[SliceSample], source,
                    regime: str, loss_cfg: LossConfig) -> float:
    """Mean combined loss on fixed, un-jittered prompts."""
    if not samples:
        return math.nan
    total = 0.0
    with tc.no_grad():
        for s in samples:
            loss = _sample_loss(model, s, source.get(s.key), regime, loss_cfg,
                                rng=None, jitter=0)
            total += loss.item()
    return total / len(samples)


def train(model: SamriModel,
          train_by_dataset: dict[str, list[SliceSample]],
          val_seen: list[SliceSample],
          val_zero_shot: list[SliceSample],
          source,
          epochs: int,
          regime: str = BOX_ONLY,
          loss_cfg: LossConfig = LossConfig(),
          opt_cfg: OptimizerConfig = OptimizerConfig(),
          sampler_cfg: SamplerConfig = SamplerConfig(),
          jitter: int = DEFAULT_JITTER,
          out_dir: str | Path | None = None,
          checkpoint_set: CheckpointSet | None = None) -> TrainResult:
    """Decoder-only fine-tuning; deterministic for a fixed seed/config."""
    if regime not in REGIMES:
        raise ValueError(f"regime must be one of {REGIMES}")
    sizes = {ds: len(samples) for ds, samples in train_by_dataset.items()}
    optimizer = AdamW(model.trainable_params(), opt_cfg)
    checkpoints = checkpoint_set if checkpoint_set is not None else CheckpointSet()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    def saver(slot: CheckpointSlot):
        if out_dir is None:
            return None
        path = out_dir / f"ckpt_{slot.regime}_{slot.criterion}.snap"
        model.save_checkpoint(path, regime=slot.regime, epoch=slot.epoch,
                              val_seen=checkpoints.slot(slot.regime, "seen_min").loss,
                              val_zero_shot=checkpoints.slot(slot.regime, "zero_shot_min").loss)
        return path

    history: list[HistoryRow] = []
    step_losses: list[float] = []
    for epoch in range(epochs):
        plan = plan_epoch(sizes, sampler_cfg, epoch)
        jitter_rng = stream_rng(sampler_cfg.seed, "jitter", epoch)
        epoch_total = 0.0
        for start in range(0, len(plan.order), opt_cfg.batch):
            batch = plan.order[start : start + opt_cfg.batch]
            optimizer.zero_grad()
            batch_loss = 0.0
            for ds, idx in batch:
                sample = train_by_dataset[ds][idx]
                loss = _sample_loss(model, sample, source.get(sample.key),
                                    regime, loss_cfg, jitter_rng, jitter)
                if not np.isfinite(loss.data):
                    _dump_state(out_dir, epoch, start, sample.key)
                    raise NonFiniteLoss(
                        f"non-finite loss at epoch {epoch}, step {start // opt_cfg.batch},"
                        f" sample {sample.key}")
                scaled = loss * (1.0 / len(batch))
                scaled.backward()
                batch_loss += scaled.item()
            optimizer.step()
            step_losses.append(batch_loss)
            epoch_total += batch_loss * len(batch)
        train_loss = epoch_total / len(plan.order)
        seen = validation_loss(model, val_seen, source, regime, loss_cfg)
        zero_shot = validation_loss(model, val_zero_shot, source, regime, loss_cfg)
        checkpoints.update(regime, epoch, seen, zero_shot, saver)
        history.append(HistoryRow(epoch, train_loss, seen, zero_shot))
    if out_dir is not None:
        write_history_csv(history, out_dir / "history.csv")
    return TrainResult(history, step_losses, checkpoints, regime)


def _dump_state(out_dir: Path | None, epoch: int, step: int, key: str) -> None:
    if out_dir is None:
        return
    (out_dir / "abort_state.json").write_text(json.dumps(
        {"epoch": epoch, "step": step, "sample": key}, indent=1))


def write_history_csv(history: list[HistoryRow], path: str | Path) -> Path:
    path = Path(path)
    lines = ["epoch,train_loss,seen_val,zs_val"]
    for row in history:
        lines.append(f"{row.epoch},{row.train_loss:.10g},"
                     f"{row.val_seen:.10g},{row.val_zero_shot:.10g}")
    path.write_text("\n".join(lines) + "\n")
    return path


# -------------------------------------------------- two-stage efficiency

@dataclass
class EfficiencyReport:
    cost_model: CostModel
    predicted_total: float
    predicted_pipeline: float
    predicted_savings: float
    measured_total: float
    measured_pipeline: float
    measured_savings: float

    def to_dict(self) -> dict:
        return {"cost_model": asdict(self.cost_model),
                **{k: getattr(self, k) for k in
                   ("predicted_total", "predicted_pipeline", "predicted_savings",
                    "measured_total", "measured_pipeline", "measured_savings")}}


def _train_pass(model: SamriModel, samples: list[SliceSample],
                grids: dict[str, np.ndarray], loss_cfg: LossConfig,
                optimizer: AdamW, regime: str) -> tuple[float, float]:
    """One full-batch epoch; returns (forward seconds, backward+update seconds)."""
    fwd = back = 0.0
    optimizer.zero_grad()
    for s in samples:
        t0 = time.perf_counter()
        loss = _sample_loss(model, s, grids[s.key], regime, loss_cfg, None, 0)
        t1 = time.perf_counter()
        (loss * (1.0 / len(samples))).backward()
        t2 = time.perf_counter()
        fwd += t1 - t0
        back += t2 - t1
    t0 = time.perf_counter()
    optimizer.step()
    back += time.perf_counter() - t0
    return fwd, back


def measure_efficiency(corpus_dir: str | Path, config: ModelConfig,
                       epochs: int = 6,
                       loss_cfg: LossConfig = LossConfig(),
                       opt_cfg: OptimizerConfig = OptimizerConfig(),
                       regime: str = BOX_ONLY,
                       timing_repeats: int = 3) -> EfficiencyReport:
    """Measure the component times on a written corpus, then run both
    training modes end to end and compare against the cost-model prediction.

    The baseline mode reloads and re-encodes the corpus every epoch; the
    two-stage mode loads and encodes once, then trains from stored
    embeddings, mirroring the two formulas exactly. Component times are
    medians over repeats, after a warm-up pass.
    """
    from .preprocess import read_corpus

    corpus_dir = Path(corpus_dir)

    def median_time(fn) -> float:
        times = []
        for _ in range(timing_repeats):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return sorted(times)[len(times) // 2]

    # warm-up: populate OS caches, resize-matrix caches, numpy buffers
    samples, _, _ = read_corpus(corpus_dir)
    warm_model = SamriModel(config)
    warm_grids = {s.key: warm_model.encode_image(s.image, s.key).grid for s in samples}
    _train_pass(warm_model, samples, warm_grids, loss_cfg,
                AdamW(warm_model.trainable_params(), opt_cfg), regime)

    t_data = median_time(lambda: read_corpus(corpus_dir))

    model = SamriModel(config)
    grids = {}

    def encode_pass():
        grids.clear()
        for s in samples:
            grids[s.key] = model.encode_image(s.image, s.key).grid

    t_enc = median_time(encode_pass)

    optimizer = AdamW(model.trainable_params(), opt_cfg)
    passes = [_train_pass(model, samples, grids, loss_cfg, optimizer, regime)
              for _ in range(timing_repeats)]
    t_dec = sorted(p[0] for p in passes)[timing_repeats // 2]
    t_back = sorted(p[1] for p in passes)[timing_repeats // 2]

    cost = CostModel(t_data, t_enc, t_dec, t_back, epochs)
    pred_total, pred_pipeline, pred_savings = predicted_times(cost)

    # measured baseline: reload + re-encode every epoch
    model_a = SamriModel(config)
    opt_a = AdamW(model_a.trainable_params(), opt_cfg)
    t0 = time.perf_counter()
    for _ in range(epochs):
        epoch_samples, _, _ = read_corpus(corpus_dir)
        epoch_grids = {s.key: model_a.encode_image(s.image, s.key).grid
                       for s in epoch_samples}
        _train_pass(model_a, epoch_samples, epoch_grids, loss_cfg, opt_a, regime)
    measured_total = time.perf_counter() - t0

    # measured two-stage: load + encode once, then decoder-only epochs
    model_b = SamriModel(config)
    opt_b = AdamW(model_b.trainable_params(), opt_cfg)
    t0 = time.perf_counter()
    stage_samples, _, _ = read_corpus(corpus_dir)
    stage_grids = {s.key: model_b.encode_image(s.image, s.key).grid
                   for s in stage_samples}
    for _ in range(epochs):
        _train_pass(model_b, stage_samples, stage_grids, loss_cfg, opt_b, regime)
    measured_pipeline = time.perf_counter() - t0

    measured_savings = 1.0 - measured_pipeline / measured_total
    return EfficiencyReport(cost, pred_total, pred_pipeline, pred_savings,
                            measured_total, measured_pipeline, measured_savings)
