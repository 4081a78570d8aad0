"""Scikit-learn style facade over the two-stage pipeline.

`fit` runs Stage 1 (embed every training image once) and Stage 2 (decoder
fine-tuning); `predict` maps an image plus prompts to a binary mask. Keeping
the sklearn parameter conventions means `get_params` / `set_params` / `clone`
compose with the wider ecosystem.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import tensor_core as tc
from .loss import LossConfig
from .metrics import dsc
from .model import ImageEmbedding, ModelConfig, SamriModel, predict_mask
from .preprocess import SliceSample, group_by_dataset
from .prompts import (
    BOX_ONLY,
    BOX_POINT,
    BoxPrompt,
    PointPrompt,
    PromptSet,
    synthesize_prompts,
)
from .training import (
    InMemorySource,
    OptimizerConfig,
    SamplerConfig,
    images_by_key,
    train,
)
from .validation import check_image_u8, check_samples


class SamriSegmenter(BaseEstimator):
    """Prompt-driven segmenter with a frozen encoder and trainable decoder."""

    def __init__(self, img_size=64, patch=8, embed_dim=32, encoder_depth=2,
                 heads=4, seed=0, regime=BOX_ONLY, lr=1e-3, weight_decay=0.1,
                 batch_size=16, epochs=50, quota=None, alpha=0.25, gamma=2.0,
                 focal_weight=20.0, jitter=20, threshold=0.5):
        self.img_size = img_size
        self.patch = patch
        self.embed_dim = embed_dim
        self.encoder_depth = encoder_depth
        self.heads = heads
        self.seed = seed
        self.regime = regime
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.quota = quota
        self.alpha = alpha
        self.gamma = gamma
        self.focal_weight = focal_weight
        self.jitter = jitter
        self.threshold = threshold

    def _model_config(self) -> ModelConfig:
        return ModelConfig(img_size=self.img_size, patch=self.patch,
                           embed_dim=self.embed_dim,
                           encoder_depth=self.encoder_depth,
                           heads=self.heads, seed=self.seed)

    def fit(self, samples: list[SliceSample],
            val_seen: list[SliceSample] | None = None,
            val_zero_shot: list[SliceSample] | None = None,
            source=None) -> "SamriSegmenter":
        """Stage 1 + Stage 2 on preprocessed slice samples."""
        check_samples(samples, self.img_size)
        val_seen = val_seen or []
        val_zero_shot = val_zero_shot or []
        self.model_ = SamriModel(self._model_config())
        if source is None:
            everything = list(samples) + list(val_seen) + list(val_zero_shot)
            source = InMemorySource(self.model_.encoder, images_by_key(everything))
        by_dataset = group_by_dataset(samples)
        quota = self.quota if self.quota is not None else max(
            len(v) for v in by_dataset.values())
        result = train(
            self.model_, by_dataset, list(val_seen), list(val_zero_shot),
            source, epochs=self.epochs, regime=self.regime,
            loss_cfg=LossConfig(self.alpha, self.gamma, self.focal_weight),
            opt_cfg=OptimizerConfig(lr=self.lr, weight_decay=self.weight_decay,
                                    batch=self.batch_size),
            sampler_cfg=SamplerConfig(quota=quota, seed=self.seed),
            jitter=self.jitter)
        self.source_ = source
        self.history_ = result.history
        self.step_losses_ = result.step_losses
        self.checkpoints_ = result.checkpoints
        return self

    def _require_fitted(self) -> SamriModel:
        if not hasattr(self, "model_"):
            raise RuntimeError("estimator is not fitted; call fit() first")
        return self.model_

    def predict(self, image: np.ndarray, box=None, points=(),
                mask_for_prompts: np.ndarray | None = None) -> np.ndarray:
        """Binary mask for one image given prompts.

        Prompts come either from an explicit box/points pair or are derived
        from a ground-truth mask (tight box, deterministic point).
        """
        model = self._require_fitted()
        check_image_u8(image, self.img_size)
        if box is None:
            if mask_for_prompts is None:
                raise ValueError("need either a box or mask_for_prompts")
            prompt_set = synthesize_prompts(mask_for_prompts, self.regime)
        else:
            if not isinstance(box, BoxPrompt):
                box = BoxPrompt(*box)
            pts = tuple(p if isinstance(p, PointPrompt) else PointPrompt(*p)
                        for p in points)
            regime = BOX_POINT if pts else BOX_ONLY
            prompt_set = PromptSet(box, pts, regime)
        return model.predict(image, prompt_set, self.threshold)

    def predict_logits(self, image: np.ndarray, prompt_set: PromptSet):
        model = self._require_fitted()
        with tc.no_grad():
            emb = model.encode_image(image)
            return model.decode(emb, prompt_set)

    def score(self, samples: list[SliceSample]) -> float:
        """Mean DSC with ground-truth-derived prompts."""
        model = self._require_fitted()
        values = []
        with tc.no_grad():
            for s in samples:
                prompt_set = synthesize_prompts(s.mask, self.regime)
                if hasattr(self, "source_") and s.key in getattr(
                        self.source_, "_grids", {}):
                    emb = ImageEmbedding(self.source_.get(s.key), s.key)
                else:
                    emb = model.encode_image(s.image, s.key)
                logits = model.decode(emb, prompt_set)
                values.append(dsc(predict_mask(logits.upsampled, self.threshold),
                                  s.mask))
        return float(np.mean(values))
