"""Evaluation math: DSC, boundary distances, size bins, Wilcoxon signed-rank."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import AllZeroDifferences, DimMismatch, EmptySurface

SIZE_CUT_SMALL_PCT = 0.5
SIZE_CUT_LARGE_PCT = 3.5
WILCOXON_EXACT_MAX_N = 20


def dsc(pred: np.ndarray, gt: np.ndarray) -> float:
    """Dice overlap 2|S∩G|/(|S|+|G|); both-empty -> 1.0, one-empty -> 0.0."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise DimMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    s = int(pred.sum())
    g = int(gt.sum())
    if s == 0 and g == 0:
        return 1.0
    if s == 0 or g == 0:
        return 0.0
    inter = int(np.logical_and(pred, gt).sum())
    return 2.0 * inter / (s + g)


def surface_points(mask: np.ndarray) -> np.ndarray:
    """(N,2) array of (x, y) boundary pixels.

    A foreground pixel is on the surface when at least one 4-neighbor is
    background; the image border counts as background. Row-major order.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise DimMismatch(f"mask must be 2-d, got {mask.shape}")
    padded = np.zeros((mask.shape[0] + 2, mask.shape[1] + 2), dtype=bool)
    padded[1:-1, 1:-1] = mask
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    boundary = mask & ~interior
    ys, xs = np.nonzero(boundary)
    return np.stack([xs, ys], axis=1).astype(np.int64)


def _pairwise_min_dists(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    diff = a[:, None, :].astype(np.float64) - b[None, :, :].astype(np.float64)
    d = np.sqrt((diff * diff).sum(axis=2))
    return d.min(axis=1), d.min(axis=0)


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        raise EmptySurface("empty surface point set")
    return pts.reshape(-1, 2)


def hausdorff(a, b) -> float:
    """max of the two directed sup-inf Euclidean distances, in pixels."""
    a = _as_points(a)
    b = _as_points(b)
    min_ab, min_ba = _pairwise_min_dists(a, b)
    return float(max(min_ab.max(), min_ba.max()))


def msd(a, b) -> float:
    """Mean surface distance: average of the two directed mean-min distances."""
    a = _as_points(a)
    b = _as_points(b)
    min_ab, min_ba = _pairwise_min_dists(a, b)
    return float(0.5 * (min_ab.mean() + min_ba.mean()))


class SizeBin(Enum):
    SMALL = "small"
    MEDIUM = "medium"
    LARGE = "large"


def size_bin(mask: np.ndarray, image_dims: tuple[int, int] | None = None) -> SizeBin:
    """Bin by mask area as % of image area, cut at 0.5% and 3.5%."""
    mask = np.asarray(mask, dtype=bool)
    h, w = image_dims if image_dims is not None else mask.shape
    pct = 100.0 * int(mask.sum()) / (h * w)
    if pct < SIZE_CUT_SMALL_PCT:
        return SizeBin.SMALL
    if pct > SIZE_CUT_LARGE_PCT:
        return SizeBin.LARGE
    return SizeBin.MEDIUM


# ------------------------------------------------------------ Wilcoxon test

@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # W = min(W+, W-)
    p_value: float
    n: int            # nonzero differences used
    method: str       # "exact" or "normal"


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks 1..n of |values| with ties given their average rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = 0.5 * (i + j) + 1.0
        ranks[order[i : j + 1]] = avg
        i = j + 1
    return ranks


def _exact_cdf_at(doubled_ranks: list[int], doubled_w: int) -> float:
    """P(W+ <= w) over the 2^n equally likely sign assignments.

    Computed by dynamic programming over the doubled (integer) rank sums;
    identical to full enumeration, count-exact in float64 for n <= 20.
    """
    total = sum(doubled_ranks)
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return float(counts[: doubled_w + 1].sum() / counts.sum())


def wilcoxon_signed_rank(differences) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test on paired differences.

    Zeros are dropped; |d| are ranked with average ranks for ties;
    W = min(W+, W-). Exact p for n <= 20, else normal approximation with
    tie and continuity corrections.
    """
    d = np.asarray(differences, dtype=np.float64)
    d = d[d != 0.0]
    n = len(d)
    if n == 0:
        raise AllZeroDifferences("no nonzero differences")
    ranks = _average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if n <= WILCOXON_EXACT_MAX_N:
        doubled = [int(round(2 * r)) for r in ranks]
        cdf = _exact_cdf_at(doubled, int(round(2 * w)))
        p = min(1.0, 2.0 * cdf)
        return WilcoxonResult(w, p, n, "exact")
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var -= float(((tie_counts**3 - tie_counts) / 48.0).sum())
    z = (w - mean + 0.5) / math.sqrt(var)
    p = min(1.0, 2.0 * 0.5 * math.erfc(-z / math.sqrt(2.0)))
    return WilcoxonResult(w, p, n, "normal")
