"""Shared fixtures.  Trained models are built once per test session."""

import numpy as np
import pytest

from hqp.data import load_dataset
from hqp.graph import build_mini_convnet, build_mini_resnet
from hqp.train import train_baseline


@pytest.fixture(scope="session")
def bundle():
    """Default desk-scale synthetic splits (8000/1000/1000/1000)."""
    return load_dataset(seed=0)


@pytest.fixture(scope="session")
def trained_resnet(bundle):
    model, acc = train_baseline(build_mini_resnet(2, seed=0), bundle.train, epochs=5, lr=0.05,
                                seed=0, holdout=bundle.holdout)
    return model


@pytest.fixture(scope="session")
def small_bundle():
    return load_dataset(seed=3, sizes={"train": 3000, "calib": 300, "val": 500, "holdout": 500})


@pytest.fixture(scope="session")
def trained_convnet(small_bundle):
    """Quarter-width plain CNN: 4 + 8 + 16 + 16 = 44 filters."""
    model, _ = train_baseline(build_mini_convnet(0.25, seed=1), small_bundle.train, epochs=6,
                              lr=0.05, seed=1, holdout=small_bundle.holdout)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
