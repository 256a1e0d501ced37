"""
Test configuration and fixtures.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add src to path for testing
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from genscl.core.config import AugmentConfig, TrainConfig
from genscl.core.numerics import Rng
from genscl.tools.data import Dataset, generate_synthetic


@pytest.fixture
def rng():
    """A fresh seeded stream."""
    return Rng(1234)


@pytest.fixture(scope="session")
def small_dataset() -> Dataset:
    """3 classes × 8 examples of 8×8 grayscale templates."""
    return generate_synthetic(3, 8, 8, 8, 0.05, Rng(7), name="small")


@pytest.fixture(scope="session")
def tiny_dataset() -> Dataset:
    """2 classes × 4 examples of 4×4 images; small enough for finite-difference checks."""
    return generate_synthetic(2, 4, 4, 4, 0.05, Rng(11), name="tiny")


@pytest.fixture
def quick_train_config() -> TrainConfig:
    """A short contrastive run on small networks."""
    return TrainConfig(
        epochs=3,
        batch_size=4,
        lr=0.05,
        warmup_epochs=1,
        hidden_dim=16,
        embed_dim=8,
        proj_dim=4,
        seed=3,
    )


@pytest.fixture
def no_augment() -> AugmentConfig:
    return AugmentConfig.disabled()


@pytest.fixture
def unit_circle_batch():
    """z at angles 0°, 90°, 180°, 270° with two classes."""
    angles = np.deg2rad([0.0, 90.0, 180.0, 270.0])
    w = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    labels = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    return w, labels
