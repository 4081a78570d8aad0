"""Build the e2e fixtures: a trained toy checkpoint, a phantom volume, and
the metadata (slice index, object box) the scripted session drags around."""

import json
import sys
from pathlib import Path

import numpy as np

from samri.data_io import PhantomSpec, extract_slices, generate_phantom, write_nifti
from samri.model import ModelConfig, SamriModel
from samri.preprocess import build_phantom_corpus, group_by_dataset
from samri.prompts import tightest_box
from samri.training import (
    InMemorySource,
    OptimizerConfig,
    SamplerConfig,
    images_by_key,
    train,
)


def main(out_dir: str) -> int:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def spec(seed):
        return PhantomSpec(dims=(64, 64, 8), object_count=(1, 2),
                           semiaxis_range=(10.0, 16.0),
                           kinds=("ellipsoid", "blob"), seed=seed)

    volume, labels = generate_phantom(spec(99))
    (out / "volume.nii").write_bytes(write_nifti(volume))

    # pick the slice with the biggest object and record its box for the UI
    best = None
    for rec in extract_slices(volume, labels):
        for target in labels.target_names:
            area = int((rec.label == target).sum())
            if best is None or area > best[0]:
                best = (area, rec.index, rec.label == target)
    assert best is not None and best[0] > 0
    _, slice_index, mask = best
    box = tightest_box(mask)
    meta = {
        "slice": slice_index,
        # half-open wire box, padded a little like a human drag would be
        "box": [max(0, box.x_min - 2), max(0, box.y_min - 2),
                min(64, box.x_max + 3), min(64, box.y_max + 3)],
        "point": [(box.x_min + box.x_max) // 2, (box.y_min + box.y_max) // 2],
    }
    (out / "meta.json").write_text(json.dumps(meta))

    samples, _ = build_phantom_corpus(
        {"fix": [spec(s) for s in range(4)]}, trim_fraction=0.0, split_seed=0)
    model = SamriModel(ModelConfig(seed=0))
    source = InMemorySource(model.encoder, images_by_key(samples))
    train(model, group_by_dataset(samples), [], [], source, epochs=120,
          regime="box_point", opt_cfg=OptimizerConfig(lr=1e-3, batch=16),
          sampler_cfg=SamplerConfig(quota=min(32, len(samples)), seed=0))
    model.save_checkpoint(out / "toy.snap", regime="box_point", epoch=120)
    print(f"fixtures written to {out}: slice {slice_index}, box {meta['box']}")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1] if len(sys.argv) > 1 else "e2e-fixtures"))
