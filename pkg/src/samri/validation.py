"""Input validation helpers shared by the estimator, service, and CLI."""

from __future__ import annotations

import numpy as np

from .errors import DimMismatch, OutOfBounds
from .preprocess import MIN_MASK_PIXELS, SliceSample


def check_image_u8(image, img_size: int | None = None) -> np.ndarray:
    """(H, W, 3) uint8 with identical channels; optionally a fixed size."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimMismatch(f"image must be (H, W, 3), got {arr.shape}")
    if arr.dtype != np.uint8:
        raise ValueError(f"image must be uint8, got {arr.dtype}")
    if not (np.array_equal(arr[:, :, 0], arr[:, :, 1])
            and np.array_equal(arr[:, :, 0], arr[:, :, 2])):
        raise ValueError("image channels must be identical grayscale replicas")
    if img_size is not None and arr.shape[:2] != (img_size, img_size):
        raise DimMismatch(f"image is {arr.shape[:2]}, model expects {(img_size, img_size)}")
    return arr


def check_binary_mask(mask, shape: tuple[int, int] | None = None,
                      min_pixels: int = 0) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise DimMismatch(f"mask must be 2-d, got {arr.shape}")
    if arr.dtype != bool:
        uniq = np.unique(arr)
        if not np.isin(uniq, (0, 1)).all():
            raise ValueError(f"mask values must be binary, got {uniq[:5]}")
        arr = arr.astype(bool)
    if shape is not None and arr.shape != shape:
        raise DimMismatch(f"mask is {arr.shape}, expected {shape}")
    if int(arr.sum()) < min_pixels:
        raise ValueError(f"mask has {int(arr.sum())} foreground pixels, needs {min_pixels}")
    return arr


def check_samples(samples: list[SliceSample], img_size: int) -> list[SliceSample]:
    if not samples:
        raise ValueError("need at least one sample")
    keys = set()
    for s in samples:
        check_image_u8(s.image, img_size)
        check_binary_mask(s.mask, s.image.shape[:2], MIN_MASK_PIXELS)
        if s.key in keys:
            raise ValueError(f"duplicate sample key {s.key}")
        keys.add(s.key)
    return samples


def check_point_in_bounds(x: int, y: int, height: int, width: int) -> None:
    if not (0 <= x < width and 0 <= y < height):
        raise OutOfBounds(f"point ({x}, {y}) outside {width}x{height}")
