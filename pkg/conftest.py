"""Shared pytest fixtures; living at the repository root also puts `scripts` on sys.path."""

import numpy as np
import pytest

from scripts.data.synthetic import SyntheticSpec, generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def two_region():
    """Dark left half (class 1), bright right half (class 2) and a 5%-noise copy of the labels."""
    size = 32
    image = np.full((size, size, 3), 0.2)
    image[:, size // 2:] = 0.8
    clean = np.ones((size, size), dtype=np.uint8)
    clean[:, size // 2:] = 2
    noise_rng = np.random.default_rng(7)
    flips = noise_rng.random((size, size)) < 0.05
    noisy = clean.copy()
    noisy[flips] = 3 - noisy[flips]
    return image, clean, noisy


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate(SyntheticSpec(num_images=6, size=32, seed=3))
