"""Command line interface: phantoms, preprocess, embed, train, eval, serve."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bank import EmbeddingBank, precompute
from .data_io import PhantomSpec, generate_phantom, write_label_nifti, write_nifti
from .loss import LossConfig
from .model import ModelConfig, SamriModel
from .preprocess import build_phantom_corpus, group_by_dataset, read_corpus, write_corpus
from .training import (
    BankSource,
    InMemorySource,
    OptimizerConfig,
    SamplerConfig,
    images_by_key,
    train,
)


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def _model_config(cfg: dict, seed: int) -> ModelConfig:
    fields = dict(cfg.get("model", {}))
    fields.setdefault("seed", seed)
    return ModelConfig(**fields)


def cmd_phantoms(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dims = tuple(int(d) for d in args.dims.split(","))
    for i in range(args.count):
        spec = PhantomSpec(dims=dims, seed=args.seed + i)
        volume, labels = generate_phantom(spec)
        (out / f"phantom_{i:03d}.nii").write_bytes(write_nifti(volume))
        (out / f"phantom_{i:03d}_labels.nii").write_bytes(write_label_nifti(labels))
        print(f"wrote phantom_{i:03d}.nii dims={dims} targets={len(labels.target_names)}")
    return 0


def cmd_preprocess(args) -> int:
    cfg = _load_config(args.config)
    datasets = cfg.get("datasets")
    if datasets:
        dataset_specs = {
            ds: [PhantomSpec(**{**spec, "dims": tuple(spec["dims"])})
                 for spec in specs]
            for ds, specs in datasets.items()}
    else:
        dims = tuple(int(d) for d in args.dims.split(","))
        dataset_specs = {
            "phantoms": [PhantomSpec(dims=dims, seed=args.seed + i)
                         for i in range(args.count)]}
    samples, assignment = build_phantom_corpus(
        dataset_specs, trim_fraction=args.trim, split_seed=args.seed)
    manifest = write_corpus(samples, assignment, args.out)
    print(f"wrote {len(samples)} samples to {manifest}")
    return 0


def cmd_embed(args) -> int:
    cfg = _load_config(args.config)
    samples, _, _ = read_corpus(Path(args.corpus).parent
                                if args.corpus.endswith(".jsonl") else args.corpus)
    model = SamriModel(_model_config(cfg, args.seed))
    bank, invocations = precompute(images_by_key(samples), model.encoder, args.out)
    print(f"bank {args.out}: {len(bank.keys())} records, {invocations} encoder calls")
    return 0


def _corpus_dir(args, cfg: dict) -> Path:
    corpus = args.corpus or cfg.get("corpus")
    if corpus is None:
        raise SystemExit("no corpus given: pass --corpus or set 'corpus' in the config")
    return Path(corpus)


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    corpus_dir = _corpus_dir(args, cfg)
    samples, _, key_split = read_corpus(corpus_dir)
    model = SamriModel(_model_config(cfg, args.seed))
    train_samples = [s for s in samples if key_split[s.key] == "train"]
    val_samples = [s for s in samples if key_split[s.key] == "val"]
    zs_ids = set(cfg.get("zero_shot_datasets", []))
    val_seen = [s for s in val_samples if s.meta.dataset_id not in zs_ids]
    val_zero_shot = [s for s in val_samples if s.meta.dataset_id in zs_ids]
    train_by_ds = group_by_dataset([s for s in train_samples
                                    if s.meta.dataset_id not in zs_ids])
    if args.bank:
        source = BankSource(EmbeddingBank(args.bank))
    else:
        source = InMemorySource(model.encoder, images_by_key(samples))
    opt_cfg = OptimizerConfig(**cfg.get("optimizer", {}))
    sampler_cfg = SamplerConfig(**{"seed": args.seed, **cfg.get("sampler", {})})
    loss_cfg = LossConfig(**cfg.get("loss", {}))
    result = train(model, train_by_ds, val_seen, val_zero_shot, source,
                   epochs=cfg.get("epochs", 50), regime=cfg.get("regime", "box_only"),
                   loss_cfg=loss_cfg, opt_cfg=opt_cfg, sampler_cfg=sampler_cfg,
                   jitter=cfg.get("jitter", 20), out_dir=args.out)
    last = result.history[-1]
    print(f"trained {len(result.history)} epochs; final train_loss={last.train_loss:.5f}")
    print(json.dumps(result.checkpoints.summary(), indent=1))
    return 0


def cmd_eval(args) -> int:
    from .eval_report import (
        compare,
        evaluate,
        read_records_jsonl,
        write_comparison_json,
        write_records_jsonl,
        write_summary_csv,
    )

    cfg = _load_config(args.config)
    samples, _, key_split = read_corpus(_corpus_dir(args, cfg))
    subset = [s for s in samples if key_split[s.key] == args.split]
    if not subset:
        print(f"no samples in split {args.split!r}", file=sys.stderr)
        return 1
    regime = {"box": "box_only", "box_only": "box_only",
              "box_point": "box_point"}[args.regime]
    records = evaluate(args.ckpt, subset, regime)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_records_jsonl(records, out / "records.jsonl")
    write_summary_csv(records, out / "summary.csv")
    comparison = None
    if args.compare_to:
        baseline = read_records_jsonl(args.compare_to)
        comparison = {"baseline": str(args.compare_to),
                      "tests": compare(records, baseline)}
    write_comparison_json(comparison, out / "comparison.json")
    print(f"wrote {len(records)} records to {out}")
    return 0


def cmd_serve(args) -> int:
    import os

    from .service import DEFAULT_ADDR, serve

    addr = args.addr or os.environ.get("SAMRI_ADDR", DEFAULT_ADDR)
    checkpoints = {Path(p).stem: p for p in args.ckpt}
    serve(checkpoints, addr=addr, debug=args.debug)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="samri",
                                     description="prompt-driven MRI segmentation at desk scale")
    parser.add_argument("--seed", type=int, default=0, help="global seed")
    parser.add_argument("--config", default=None, help="JSON config file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantoms", help="generate synthetic labelled volumes")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--dims", default="64,64,12")
    p.set_defaults(func=cmd_phantoms)

    p = sub.add_parser("preprocess", help="build a preprocessed slice corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=6)
    p.add_argument("--dims", default="64,64,12")
    p.add_argument("--trim", type=float, default=0.10)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("embed", help="precompute the embedding bank (Stage 1)")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("train", help="fine-tune the mask decoder (Stage 2)")
    p.add_argument("--corpus", default=None, help="corpus dir (or 'corpus' in --config)")
    p.add_argument("--bank", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint over a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", default=None, help="corpus dir (or 'corpus' in --config)")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--regime", default="box", choices=["box", "box_only", "box_point"])
    p.add_argument("--compare-to", default=None, help="baseline records.jsonl")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="run the HTTP segmentation service")
    p.add_argument("--ckpt", action="append", required=True)
    p.add_argument("--addr", default=None)
    p.add_argument("--debug", action="store_true")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
