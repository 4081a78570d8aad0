"""Training objective: focal loss, Dice loss, and their 20:1 combination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .errors import ShapeMismatch
from .tensor_core import Tensor

PROB_EPS = 1e-7
DICE_EPS = 1e-7


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.25
    gamma: float = 2.0
    focal_weight: float = 20.0
    # alpha is applied uniformly by default; the class-conditional variant
    # (alpha on foreground, 1-alpha on background) sits behind this flag
    class_conditional_alpha: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0,1], got {self.alpha}")
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


def _check_pair(probs: Tensor, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    if probs.shape != mask.shape:
        raise ShapeMismatch(f"probs {probs.shape} vs mask {mask.shape}")
    return mask


def focal_loss(probs: Tensor, mask: np.ndarray, cfg: LossConfig = LossConfig()) -> Tensor:
    """Mean of -alpha * (1-p)^gamma * log(p), p being the true-class probability."""
    probs = tc._as_tensor(probs)
    g = _check_pair(probs, mask)
    # p = s where g=1, 1-s where g=0
    p = probs * g + (1.0 - probs) * (1.0 - g)
    p = tc.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    if cfg.class_conditional_alpha:
        alpha = cfg.alpha * g + (1.0 - cfg.alpha) * (1.0 - g)
    else:
        alpha = cfg.alpha
    term = tc.pow_const(1.0 - p, cfg.gamma) * tc.log(p) * -1.0 * alpha
    return tc.tmean(term)


def dice_loss(probs: Tensor, mask: np.ndarray) -> Tensor:
    """1 - 2*sum(s*g) / (sum(s^2) + sum(g^2) + eps)."""
    probs = tc._as_tensor(probs)
    g = _check_pair(probs, mask)
    inter = tc.tsum(probs * g)
    denom = tc.tsum(probs * probs) + float(np.sum(g * g)) + DICE_EPS
    return 1.0 - 2.0 * inter / denom


def samri_loss(probs: Tensor, mask: np.ndarray, cfg: LossConfig = LossConfig()) -> Tensor:
    """focal_weight * focal + dice; the gradient is the same linear combination."""
    return cfg.focal_weight * focal_loss(probs, mask, cfg) + dice_loss(probs, mask)
