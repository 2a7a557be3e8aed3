from __future__ import annotations

import math

import numpy as np
import pytest

from crossview_pid.harness.config import RunConfig
from crossview_pid.scenegen import WorldSpec, generate_dataset

SMALL_WORLD = dict(map_size=64, world_height=192, world_width=96, n_points=64, n_worlds=2, landmark_count=6)
SMALL_NOISE = (2.0, 2.0, math.radians(3.0))


@pytest.fixture(scope="session")
def small_spec() -> WorldSpec:
    return WorldSpec(**SMALL_WORLD)


@pytest.fixture(scope="session")
def small_dataset(small_spec):
    return generate_dataset(small_spec, 12, SMALL_NOISE, seed=3)


@pytest.fixture()
def small_config() -> RunConfig:
    return RunConfig({
        "model.channels": 4, "model.encoder_hidden": 8, "model.embed_dim": 4, "model.reduced_points": 8,
        "model.phi_hidden": 16, "model.psi_hidden": 16, "model.iterations": 1, "train.epochs": 2,
        "train.learning_rate": 1e-3, "eval.chunk_size": 4,
    })


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
