"""Acceptance suite: one test per release criterion, each printing a
pass/fail line. Run with `pytest tests/test_acceptance.py -v -s`."""

import time

import numpy as np
import pytest

import samri.tensor_core as tc
from conftest import random_mask
from oracles import dsc_oracle, hausdorff_oracle, msd_oracle, wilcoxon_oracle
from samri.bank import CostModel, EmbeddingBank, precompute, predicted_times
from samri.data_io import PhantomSpec, Volume, read_nifti, write_nifti
from samri.errors import ChecksumMismatch
from samri.eval_report import evaluate
from samri.loss import PROB_EPS, LossConfig, dice_loss, focal_loss, samri_loss
from samri.metrics import (
    SizeBin,
    dsc,
    hausdorff,
    msd,
    size_bin,
    surface_points,
    wilcoxon_signed_rank,
)
from samri.model import ImageEmbedding, ModelConfig, SamriModel, predict_mask
from samri.preprocess import build_phantom_corpus, write_corpus
from samri.prompts import BOX_ONLY, BOX_POINT, BoxPrompt, PointPrompt, PromptSet, synthesize_prompts
from samri.tensor_core import Parameter, Tensor, grad_check
from samri.training import (
    BankSource,
    CheckpointSet,
    InMemorySource,
    OnTheFlySource,
    OptimizerConfig,
    SamplerConfig,
    images_by_key,
    measure_efficiency,
    plan_epoch,
    train,
)

RNG = np.random.default_rng(20260809)


def _report(name: str, detail: str = "") -> None:
    print(f"\nACCEPTANCE PASS: {name}" + (f" ({detail})" if detail else ""))


def _mean_dsc(model, samples, source, regime):
    values = []
    with tc.no_grad():
        for s in samples:
            prompt_set = synthesize_prompts(s.mask, regime)
            logits = model.decode(ImageEmbedding(source.get(s.key), s.key), prompt_set)
            values.append(dsc(predict_mask(logits.upsampled), s.mask))
    return float(np.mean(values))


# ---------------------------------------------------------------------------
def test_gradient_fidelity():
    """Every decoder parameter at the default toy config < 1e-4; each
    primitive < 1e-6 in isolation; total runtime < 5 min."""
    t_start = time.perf_counter()

    # primitives in isolation (64-bit, central differences)
    mat44 = Tensor(RNG.standard_normal((4, 4)))
    cases = {
        "matmul": lambda p: tc.matmul(p.tensor, mat44),
        "layer_norm": lambda p: tc.layer_norm(p.tensor, Tensor(np.ones(4)),
                                              Tensor(np.zeros(4))),
        "softmax": lambda p: tc.softmax(p.tensor),
        "gelu": lambda p: tc.gelu(p.tensor),
        "sigmoid": lambda p: tc.sigmoid(p.tensor),
        "bilinear_resize": lambda p: tc.bilinear_resize(p.tensor, (5, 7)),
    }
    worst_primitive = 0.0
    for name, fn in cases.items():
        p = Parameter(name, RNG.standard_normal((3, 4)))
        weights = Tensor(RNG.standard_normal(fn(p).shape))
        err = grad_check(lambda: tc.tsum(fn(p) * weights), [p])
        worst_primitive = max(worst_primitive, err)
    p = Parameter("conv_in", RNG.standard_normal((3, 2, 2)))
    w = Parameter("conv_w", RNG.standard_normal((3, 2, 2, 2)))
    b = Parameter("conv_b", RNG.standard_normal(2))
    wconv = Tensor(RNG.standard_normal((2, 4, 4)))
    err = grad_check(lambda: tc.tsum(
        tc.conv2d_transpose(p.tensor, w.tensor, b.tensor) * wconv), [p, w, b])
    worst_primitive = max(worst_primitive, err)
    assert worst_primitive < 1e-6

    # full decoder, default toy config
    model = SamriModel(ModelConfig())
    gray = RNG.integers(0, 256, (64, 64), dtype=np.uint8)
    emb = model.encode_image(np.repeat(gray[:, :, None], 3, axis=2))
    mask = np.zeros((64, 64), bool)
    mask[16:42, 20:44] = True
    prompts = PromptSet(BoxPrompt(20, 16, 43, 41), (PointPrompt(30, 28),), BOX_POINT)

    def loss():
        logits = model.decode(emb, prompts)
        return samri_loss(tc.sigmoid(logits.upsampled), mask)

    decoder_err = grad_check(loss, model.trainable_params())
    elapsed = time.perf_counter() - t_start
    assert decoder_err < 1e-4, decoder_err
    assert elapsed < 300.0
    _report("gradient fidelity",
            f"decoder max rel err {decoder_err:.2e}, primitives {worst_primitive:.2e}, "
            f"{elapsed:.0f}s")


# ---------------------------------------------------------------------------
def test_loss_identities():
    g = np.zeros(64)
    g[:20] = 1.0
    assert dice_loss(Tensor(g.copy()), g).item() < 1e-5
    s = np.zeros(64)
    s[30:] = 1.0
    assert dice_loss(Tensor(s), g).item() > 1.0 - 1e-5

    cfg_bce = LossConfig(alpha=1.0, gamma=0.0)
    for _ in range(100):
        probs = RNG.random((8, 8))
        mask = (RNG.random((8, 8)) > 0.5).astype(float)
        clipped = np.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
        bce = float(-(mask * np.log(clipped) + (1 - mask) * np.log(1 - clipped)).mean())
        assert abs(focal_loss(Tensor(probs), mask, cfg_bce).item() - bce) < 1e-9

    for _ in range(50):
        probs = RNG.random((6, 6))
        mask = (RNG.random((6, 6)) > 0.5).astype(float)
        combined = samri_loss(Tensor(probs), mask).item()
        parts = 20.0 * focal_loss(Tensor(probs), mask).item() \
            + dice_loss(Tensor(probs), mask).item()
        assert abs(combined - parts) < 1e-12
    _report("loss identities")


# ---------------------------------------------------------------------------
def test_metric_oracle_equivalence():
    checked_distances = 0
    for i in range(1000):
        h = int(RNG.integers(3, 33))
        w = int(RNG.integers(3, 33))
        a = random_mask(RNG, h, w)
        b = random_mask(RNG, h, w)
        assert dsc(a, b) == dsc_oracle(a, b)
        sa = [tuple(p) for p in surface_points(a)]
        sb = [tuple(p) for p in surface_points(b)]
        if sa and sb:
            hd = hausdorff(sa, sb)
            md = msd(sa, sb)
            assert abs(hd - hausdorff_oracle(sa, sb)) < 1e-9
            assert abs(md - msd_oracle(sa, sb)) < 1e-9
            assert hd >= md
            checked_distances += 1
    assert checked_distances > 800
    _report("metric oracle equivalence", f"{checked_distances} surface pairs")


# ---------------------------------------------------------------------------
def test_size_bin_arithmetic():
    def mask_with(n):
        m = np.zeros(64 * 64, bool)
        m[:n] = True
        return m.reshape(64, 64)

    assert size_bin(mask_with(20)) is SizeBin.SMALL
    assert size_bin(mask_with(21)) is SizeBin.MEDIUM
    assert size_bin(mask_with(144)) is SizeBin.LARGE
    _report("size-bin arithmetic", "20/21/144 px -> small/medium/large")


# ---------------------------------------------------------------------------
def test_two_stage_equivalence(tmp_path):
    """Bank vs on-the-fly: identical losses, M vs N*M encoder calls, and the
    cost-model formulas (synthetic + measured)."""
    # losses + counters over 50 steps
    config = ModelConfig(img_size=16, patch=8, seed=0)
    specs = {"eq": [PhantomSpec(dims=(16, 16, 8), object_count=(1, 2),
                                semiaxis_range=(3.0, 5.0), seed=s) for s in range(4)]}
    samples, _ = build_phantom_corpus(specs, trim_fraction=0.0, split_seed=0)
    samples = samples[:10]
    images = images_by_key(samples)
    epochs, batch = 25, 5  # 10 samples / batch 5 = 2 steps per epoch -> 50 steps

    model_bank = SamriModel(config)
    bank, stage1 = precompute(images, model_bank.encoder, tmp_path / "eq.samriemb")
    result_bank = train(model_bank, {"eq": samples}, [], [], BankSource(bank),
                        epochs=epochs, regime=BOX_ONLY,
                        opt_cfg=OptimizerConfig(batch=batch),
                        sampler_cfg=SamplerConfig(quota=len(samples), seed=3))

    model_fly = SamriModel(config)
    fly = OnTheFlySource(model_fly.encoder, images, downcast_to_f32=True)
    result_fly = train(model_fly, {"eq": samples}, [], [], fly,
                       epochs=epochs, regime=BOX_ONLY,
                       opt_cfg=OptimizerConfig(batch=batch),
                       sampler_cfg=SamplerConfig(quota=len(samples), seed=3))

    assert len(result_bank.step_losses) == 50
    worst = max(abs(a - b) for a, b in
                zip(result_bank.step_losses, result_fly.step_losses))
    assert worst < 1e-6, worst
    m = len(samples)
    assert stage1 == m and model_bank.encoder.invocations == m
    assert model_fly.encoder.invocations == epochs * m

    # synthetic cost-model example
    t_total, t_pipeline, savings = predicted_times(CostModel(0.1, 1.0, 0.05, 0.05, 100))
    assert abs(t_total - 120.0) < 1e-9
    assert abs(t_pipeline - 11.1) < 1e-9
    assert abs(savings - 0.9075) < 1e-4

    # measured toy-scale wall clock vs prediction from measured components
    corpus_dir = tmp_path / "eff_corpus"
    eff_samples, assignment = build_phantom_corpus(
        {"eff": [PhantomSpec(dims=(64, 64, 10), object_count=(1, 2),
                             semiaxis_range=(8.0, 16.0), seed=s) for s in range(2)]},
        0.1, split_seed=0)
    write_corpus(eff_samples[:16], assignment, corpus_dir)
    report = measure_efficiency(corpus_dir,
                                ModelConfig(img_size=64, patch=8,
                                            encoder_depth=12, seed=0),
                                epochs=8)
    assert report.measured_savings > 0.0
    rel = abs(report.measured_savings - report.predicted_savings) \
        / report.predicted_savings
    assert rel <= 0.25, (report.measured_savings, report.predicted_savings)
    _report("two-stage equivalence",
            f"max step diff {worst:.1e}; counters {m} vs {epochs * m}; "
            f"measured savings {report.measured_savings:.3f} vs "
            f"predicted {report.predicted_savings:.3f} (rel {rel:.2f})")


# ---------------------------------------------------------------------------
@pytest.mark.parametrize("regimes", [(BOX_ONLY, BOX_POINT)])
def test_toy_scale_learning(learning_corpus, regimes):
    """32 phantom slices to train DSC >= 0.90; 16 held-out slices >= 0.75;
    box+point within 0.02 of box-only or better; < 30 min."""
    t_start = time.perf_counter()
    train_samples, test_samples = learning_corpus
    assert len(train_samples) == 32 and len(test_samples) == 16
    results = {}
    for regime in regimes:
        model = SamriModel(ModelConfig(seed=0))
        source = InMemorySource(model.encoder,
                                images_by_key(train_samples + test_samples))
        train(model, {"phA": train_samples}, [], [], source, epochs=300,
              regime=regime, opt_cfg=OptimizerConfig(lr=1e-3, batch=16),
              sampler_cfg=SamplerConfig(quota=32, seed=0))
        results[regime] = (_mean_dsc(model, train_samples, source, regime),
                           _mean_dsc(model, test_samples, source, regime))
    elapsed = time.perf_counter() - t_start
    for regime, (train_dsc, test_dsc) in results.items():
        assert train_dsc >= 0.90, (regime, train_dsc)
        assert test_dsc >= 0.75, (regime, test_dsc)
    assert results[BOX_POINT][1] >= results[BOX_ONLY][1] - 0.02
    assert elapsed < 1800.0
    _report("toy-scale learning",
            "; ".join(f"{r}: train {tr:.3f} test {te:.3f}"
                      for r, (tr, te) in results.items()) + f"; {elapsed:.0f}s")


# ---------------------------------------------------------------------------
def test_sampler_contract():
    union_small: set[int] = set()
    for epoch in range(10):
        plan = plan_epoch({"small": 100, "big": 8000},
                          SamplerConfig(quota=500, seed=11), epoch)
        assert len(plan.per_dataset["small"]) == 500
        assert len(plan.per_dataset["big"]) == 500
        assert len(set(plan.per_dataset["big"])) == 500
        union_small.update(plan.per_dataset["small"])
    assert len(union_small) <= 100
    _report("sampler contract",
            f"union of small-dataset indices over 10 epochs: {len(union_small)}")


# ---------------------------------------------------------------------------
def test_wilcoxon_exactness():
    result = wilcoxon_signed_rank([1, 2, 3])
    assert result.p_value == 0.25
    for trial in range(200):
        n = int(RNG.integers(1, 13))
        diffs = RNG.integers(-9, 10, size=n)
        if not diffs.any():
            diffs[0] = 1
        ours = wilcoxon_signed_rank(diffs.tolist())
        w_ref, p_ref = wilcoxon_oracle(diffs.tolist())
        assert ours.method == "exact"
        assert abs(ours.statistic - w_ref) < 1e-12
        assert abs(ours.p_value - p_ref) < 1e-12
    _report("wilcoxon exactness", "200 vectors, n <= 12, full enumeration")


# ---------------------------------------------------------------------------
def test_formats(tmp_path):
    # NIfTI float32 round trip, bit exact
    for _ in range(25):
        dims = tuple(int(d) for d in RNG.integers(2, 10, size=3))
        volume = Volume(RNG.standard_normal(dims).astype(np.float32))
        parsed, _ = read_nifti(write_nifti(volume))
        np.testing.assert_array_equal(parsed.voxels, volume.voxels)

    # bank files byte-identical across repeat runs
    config = ModelConfig(img_size=16, patch=8, seed=0)
    images = {}
    for i in range(5):
        gray = RNG.integers(0, 256, (16, 16), dtype=np.uint8)
        images[f"k/{i:02d}/000/1"] = np.repeat(gray[:, :, None], 3, axis=2)
    path_a, path_b = tmp_path / "a.samriemb", tmp_path / "b.samriemb"
    precompute(images, SamriModel(config).encoder, path_a)
    precompute(images, SamriModel(config).encoder, path_b)
    assert path_a.read_bytes() == path_b.read_bytes()

    # corrupted record raises ChecksumMismatch
    blob = bytearray(path_a.read_bytes())
    blob[70] ^= 0x40
    path_a.write_bytes(bytes(blob))
    with pytest.raises(ChecksumMismatch):
        EmbeddingBank(path_a).verify_all()

    # checkpoint reload reproduces identical evaluation records
    from samri.preprocess import SampleMeta, SliceSample

    samples = []
    for i in range(5):
        mask = np.zeros((16, 16), bool)
        mask[2 + i % 3 : 10 + i % 3, 3 : 12] = True
        gray = np.full((16, 16), 20, np.uint8)
        gray[mask] = 210
        samples.append(SliceSample(np.repeat(gray[:, :, None], 3, axis=2), mask,
                                   SampleMeta("fm", f"p{i:02d}", i, 1, "t")))
    ckpt = SamriModel(config).save_checkpoint(tmp_path / "fmt.snap")
    records_a = evaluate(ckpt, samples, BOX_ONLY)
    records_b = evaluate(ckpt, samples, BOX_ONLY)
    assert [r.__dict__ for r in records_a] == [r.__dict__ for r in records_b]
    _report("formats", "nifti round-trip, bank bytes, checksums, checkpoint reload")


# ---------------------------------------------------------------------------
def test_checkpoint_retention():
    cases = {
        BOX_ONLY: ([3.0, 2.0, 1.0, 2.0], [2.0, 1.0, 2.0, 3.0]),
        BOX_POINT: ([4.0, 4.0, 2.0, 3.0], [5.0, 1.0, 1.0, 0.5]),
    }
    cs = CheckpointSet()
    for regime, (seen, zero_shot) in cases.items():
        for epoch, (s, z) in enumerate(zip(seen, zero_shot)):
            cs.update(regime, epoch, s, z)
    assert cs.slot(BOX_ONLY, "seen_min").epoch == 2
    assert cs.slot(BOX_ONLY, "zero_shot_min").epoch == 1
    assert cs.slot(BOX_POINT, "seen_min").epoch == 2
    assert cs.slot(BOX_POINT, "zero_shot_min").epoch == 3
    assert len(cs.slots) == 4
    _report("checkpoint retention", "four argmin slots correct")


# ---------------------------------------------------------------------------
def test_service_contract(tmp_path):
    from fastapi.testclient import TestClient

    from samri.data_io import generate_phantom
    from samri.service import create_app

    ckpt = SamriModel(ModelConfig(img_size=16, patch=8, seed=0)) \
        .save_checkpoint(tmp_path / "svc.snap")
    client = TestClient(create_app({"svc": ckpt}, debug=True))
    volume, _ = generate_phantom(PhantomSpec(dims=(16, 16, 8), object_count=(1, 1),
                                             semiaxis_range=(3.0, 5.0), seed=4))
    vid = client.post("/v1/volumes", content=write_nifti(volume)).json()["volume_id"]

    body = {"volume_id": vid, "slice": 2, "box": [2, 2, 14, 14],
            "points": [], "checkpoint_id": "svc"}
    first = client.post("/v1/segment", json=body).json()
    replay = client.post("/v1/segment", json=body).json()
    assert first["mask"] == replay["mask"]
    assert replay["cache_hit"] is True

    for k in range(20):  # prompt refinements on one slice
        refined = dict(body, points=[{"x": 4 + (k % 8), "y": 5, "label": "foreground"}])
        response = client.post("/v1/segment", json=refined)
        assert response.status_code == 200
        assert sum(response.json()["mask"]["runs"]) == 16 * 16
    counts = client.get("/v1/health").json()["debug"]["encoder_invocations"][vid]
    assert counts == {"2": 1}
    _report("service contract",
            "replay identical; 1 encode across 21 requests; RLE sums hold")
