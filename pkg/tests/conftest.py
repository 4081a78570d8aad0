import numpy as np
import pytest

from samri.data_io import PhantomSpec
from samri.preprocess import build_phantom_corpus


def learning_spec(seed: int) -> PhantomSpec:
    """Phantom recipe used by the toy-scale learning checks."""
    return PhantomSpec(dims=(64, 64, 8), object_count=(2, 3),
                       semiaxis_range=(10.0, 18.0), kinds=("ellipsoid", "blob"),
                       object_intensity_range=(140.0, 220.0), noise_sigma=4.0,
                       seed=seed)


def _strided(samples, count):
    stride = max(1, len(samples) // count)
    return samples[::stride][:count]


@pytest.fixture(scope="session")
def learning_corpus():
    """32 train slices and a held-out 16-slice test split, phantom-backed."""
    train_all, _ = build_phantom_corpus(
        {"phA": [learning_spec(s) for s in range(8)]}, trim_fraction=0.1, split_seed=0)
    test_all, _ = build_phantom_corpus(
        {"phB": [learning_spec(100 + s) for s in range(4)]}, trim_fraction=0.1, split_seed=0)
    return _strided(train_all, 32), _strided(test_all, 16)


@pytest.fixture(scope="session")
def small_corpus():
    """Handful of samples for fast pipeline tests."""
    samples, assignment = build_phantom_corpus(
        {"ds": [PhantomSpec(dims=(64, 64, 8), object_count=(1, 2),
                            semiaxis_range=(8.0, 14.0), seed=s) for s in range(2)]},
        trim_fraction=0.1, split_seed=0)
    return samples, assignment


def random_mask(rng: np.random.Generator, h: int, w: int,
                ensure_nonempty: bool = False) -> np.ndarray:
    """Blobby random mask (threshold of smoothed noise)."""
    noise = rng.random((h, w))
    k = 3
    padded = np.pad(noise, k, mode="wrap")
    smooth = sum(padded[dy : dy + h, dx : dx + w]
                 for dy in range(2 * k + 1) for dx in range(2 * k + 1))
    mask = smooth > np.percentile(smooth, rng.integers(55, 90))
    if ensure_nonempty and not mask.any():
        mask[rng.integers(0, h), rng.integers(0, w)] = True
    return mask
