import json

import pytest

from samri.cli import main
from samri.data_io import read_nifti


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    """Full CLI pipeline: phantoms -> preprocess -> embed -> train -> eval."""
    root = tmp_path_factory.mktemp("pipeline")
    config = {
        "model": {"img_size": 32, "patch": 8},
        "epochs": 2,
        "regime": "box_only",
        "optimizer": {"lr": 1e-3, "batch": 8},
        "sampler": {"quota": 8},
        "datasets": {
            "main": [{"dims": [32, 32, 10], "object_count": [1, 2],
                      "semiaxis_range": [4.0, 8.0], "seed": s} for s in range(10)],
        },
    }
    cfg_path = root / "run.json"
    cfg_path.write_text(json.dumps(config))
    corpus = root / "corpus"
    assert main(["--config", str(cfg_path), "preprocess", "--out", str(corpus)]) == 0
    bank = root / "bank.samriemb"
    assert main(["--config", str(cfg_path), "embed", "--corpus", str(corpus),
                 "--out", str(bank)]) == 0
    rundir = root / "run"
    assert main(["--config", str(cfg_path), "train", "--corpus", str(corpus),
                 "--bank", str(bank), "--out", str(rundir)]) == 0
    return root, cfg_path, corpus, bank, rundir


def test_phantoms_command(tmp_path):
    out = tmp_path / "phantoms"
    assert main(["phantoms", "--out", str(out), "--count", "2",
                 "--dims", "16,16,8"]) == 0
    files = sorted(p.name for p in out.iterdir())
    assert files == ["phantom_000.nii", "phantom_000_labels.nii",
                     "phantom_001.nii", "phantom_001_labels.nii"]
    volume, _ = read_nifti((out / "phantom_000.nii").read_bytes())
    assert volume.dims == (16, 16, 8)
    _, labels = read_nifti((out / "phantom_000_labels.nii").read_bytes())
    assert labels is not None


def test_pipeline_outputs(pipeline_dir):
    root, cfg, corpus, bank, rundir = pipeline_dir
    assert (corpus / "manifest.jsonl").exists()
    rows = [json.loads(l) for l in (corpus / "manifest.jsonl").read_text().splitlines()]
    assert {r["split"] for r in rows} <= {"train", "val", "test"}
    assert bank.exists()
    assert (rundir / "history.csv").exists()
    history = (rundir / "history.csv").read_text().splitlines()
    assert history[0] == "epoch,train_loss,seen_val,zs_val"
    assert len(history) == 3  # header + 2 epochs
    snaps = list(rundir.glob("ckpt_*.snap"))
    assert snaps


def test_eval_command(pipeline_dir, tmp_path):
    root, cfg, corpus, bank, rundir = pipeline_dir
    ckpt = rundir / "ckpt_box_only_seen_min.snap"
    report = tmp_path / "report"
    rc = main(["eval", "--ckpt", str(ckpt), "--corpus", str(corpus),
               "--split", "train", "--regime", "box", "--out", str(report)])
    assert rc == 0
    assert (report / "records.jsonl").exists()
    assert (report / "summary.csv").exists()
    comparison = json.loads((report / "comparison.json").read_text())
    assert comparison["baseline"] is None
    # comparing a report against itself: all-zero diffs surfaced as p=1 flags
    report2 = tmp_path / "report2"
    rc = main(["eval", "--ckpt", str(ckpt), "--corpus", str(corpus),
               "--split", "train", "--regime", "box",
               "--compare-to", str(report / "records.jsonl"), "--out", str(report2)])
    assert rc == 0
    comparison = json.loads((report2 / "comparison.json").read_text())
    assert comparison["tests"]["dsc"]["all_zero"] is True
    assert comparison["tests"]["dsc"]["p"] == 1.0


def test_eval_empty_split_fails(pipeline_dir, tmp_path, capsys):
    root, cfg, corpus, bank, rundir = pipeline_dir
    ckpt = rundir / "ckpt_box_only_seen_min.snap"
    # corpus has 3 patients: train/val/test all non-empty is not guaranteed for
    # every seed; use a split that is guaranteed empty by construction instead
    rows = (corpus / "manifest.jsonl").read_text().splitlines()
    splits = {json.loads(r)["split"] for r in rows}
    missing = ({"train", "val", "test"} - splits)
    if not missing:
        pytest.skip("all splits populated for this corpus")
    rc = main(["eval", "--ckpt", str(ckpt), "--corpus", str(corpus),
               "--split", sorted(missing)[0], "--out", str(tmp_path / "r")])
    assert rc == 1
