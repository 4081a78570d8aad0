"""Prompt synthesis: tight boxes, train-time jitter, deterministic interior points."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_cdt

from .errors import EmptyMask, OutOfBounds
from .rng import Xoshiro256StarStar

BOX_ONLY = "box_only"
BOX_POINT = "box_point"
DEFAULT_JITTER = 20


@dataclass(frozen=True)
class BoxPrompt:
    """Axis-aligned box, inclusive pixel coordinates."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def validate(self, height: int, width: int) -> "BoxPrompt":
        if not (0 <= self.x_min <= self.x_max < width
                and 0 <= self.y_min <= self.y_max < height):
            raise OutOfBounds(f"box {self} outside {width}x{height} image")
        return self


@dataclass(frozen=True)
class PointPrompt:
    x: int
    y: int
    label: str = "foreground"  # or "background"

    def validate(self, height: int, width: int) -> "PointPrompt":
        if not (0 <= self.x < width and 0 <= self.y < height):
            raise OutOfBounds(f"point {self} outside {width}x{height} image")
        if self.label not in ("foreground", "background"):
            raise ValueError(f"bad point label {self.label!r}")
        return self


@dataclass(frozen=True)
class PromptSet:
    box: BoxPrompt
    points: tuple[PointPrompt, ...] = ()
    regime: str = BOX_ONLY

    def __post_init__(self):
        if self.regime not in (BOX_ONLY, BOX_POINT):
            raise ValueError(f"bad regime {self.regime!r}")
        if self.regime == BOX_ONLY and self.points:
            raise ValueError("box_only prompt sets carry no points")
        object.__setattr__(self, "points", tuple(self.points))


def tightest_box(mask: np.ndarray) -> BoxPrompt:
    """Minimal box containing every foreground pixel."""
    mask = np.asarray(mask, dtype=bool)
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise EmptyMask("cannot derive a box from an empty mask")
    return BoxPrompt(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


def jitter_box(box: BoxPrompt, image_dims: tuple[int, int],
               rng: Xoshiro256StarStar, max_shift: int = DEFAULT_JITTER,
               max_retries: int = 8) -> BoxPrompt:
    """Shift each coordinate by an independent uniform integer in [-max_shift, max_shift].

    Results are clamped to the image; degenerate draws are retried a bounded
    number of times before falling back to the unjittered box.
    """
    h, w = image_dims
    for _ in range(max_retries):
        x_min = min(max(box.x_min + rng.randint(-max_shift, max_shift), 0), w - 1)
        y_min = min(max(box.y_min + rng.randint(-max_shift, max_shift), 0), h - 1)
        x_max = min(max(box.x_max + rng.randint(-max_shift, max_shift), 0), w - 1)
        y_max = min(max(box.y_max + rng.randint(-max_shift, max_shift), 0), h - 1)
        if x_min <= x_max and y_min <= y_max:
            return BoxPrompt(x_min, y_min, x_max, y_max)
    return box


def interior_distances(mask: np.ndarray) -> np.ndarray:
    """4-connected (taxicab) distance to background; outside the image counts as background."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.zeros((mask.shape[0] + 2, mask.shape[1] + 2), dtype=np.uint8)
    padded[1:-1, 1:-1] = mask
    dist = distance_transform_cdt(padded, metric="taxicab")
    return np.asarray(dist[1:-1, 1:-1], dtype=np.int64)


def select_point(mask: np.ndarray) -> PointPrompt:
    """Most-interior foreground pixel; ties break to lowest (y, x)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMask("cannot select a point from an empty mask")
    dist = interior_distances(mask)
    flat = int(np.argmax(dist))  # row-major argmax = lowest (y, x) among ties
    y, x = divmod(flat, mask.shape[1])
    return PointPrompt(int(x), int(y), "foreground")


def random_foreground_point(mask: np.ndarray, rng: Xoshiro256StarStar) -> PointPrompt:
    """Uniform foreground pixel; the train-time analogue of box jitter."""
    mask = np.asarray(mask, dtype=bool)
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise EmptyMask("cannot select a point from an empty mask")
    i = rng.randbelow(len(xs))
    return PointPrompt(int(xs[i]), int(ys[i]), "foreground")


def synthesize_prompts(mask: np.ndarray, regime: str,
                       rng: Xoshiro256StarStar | None = None,
                       max_shift: int = DEFAULT_JITTER) -> PromptSet:
    """Training/eval prompts from a ground-truth mask.

    With an rng (training) the box is jittered and the point is a uniform
    foreground draw; without one (evaluation) prompts are deterministic: the
    exact tight box and the max-inset point.
    """
    mask = np.asarray(mask, dtype=bool)
    box = tightest_box(mask)
    if rng is not None and max_shift > 0:
        box = jitter_box(box, mask.shape, rng, max_shift)
    if regime == BOX_POINT:
        point = select_point(mask) if rng is None else random_foreground_point(mask, rng)
        return PromptSet(box, (point,), BOX_POINT)
    return PromptSet(box, (), BOX_ONLY)
