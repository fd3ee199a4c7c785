"""Shared fixtures. Heavy trained-model fixtures are session-scoped and
built lazily, so cheap test modules stay fast."""

import time

import numpy as np
import pytest

from sdlab import (DenoiserArch, DenoiserTrainConfig, OracleDenoiser, build_corpus,
                   build_schedule, default_point_corpus, train_denoiser)
from sdlab.analysis import train_classifier


@pytest.fixture(scope="session")
def schedule():
    return build_schedule(1000)


@pytest.fixture(scope="session")
def point_corpus():
    return default_point_corpus()


@pytest.fixture(scope="session")
def image_corpus():
    return build_corpus("image", None)


@pytest.fixture(scope="session")
def point_oracle(schedule, point_corpus):
    return OracleDenoiser(schedule, point_corpus)


@pytest.fixture(scope="session")
def trained_point(schedule, point_corpus):
    """Default epsilon-prediction point model; returns (model, train_seconds)."""
    start = time.time()
    model = train_denoiser(point_corpus, schedule, DenoiserArch(kind="point_mlp"),
                           DenoiserTrainConfig(), np.random.default_rng(0))
    return model, time.time() - start


@pytest.fixture(scope="session")
def trained_point_velocity(schedule, point_corpus):
    """Velocity-parameterized sibling of the point model."""
    start = time.time()
    arch = DenoiserArch(kind="point_mlp", prediction_type="velocity")
    model = train_denoiser(point_corpus, schedule, arch,
                           DenoiserTrainConfig(), np.random.default_rng(0))
    return model, time.time() - start


@pytest.fixture(scope="session")
def trained_image(schedule, image_corpus):
    """Slim conv model sized for a single CPU; returns (model, train_seconds)."""
    start = time.time()
    arch = DenoiserArch(kind="image_conv", hidden=64)
    cfg = DenoiserTrainConfig(steps=3000, batch_size=128)
    model = train_denoiser(image_corpus, schedule, arch, cfg, np.random.default_rng(0))
    return model, time.time() - start


@pytest.fixture(scope="session")
def image_classifier(image_corpus):
    bundle = train_classifier(image_corpus, np.random.default_rng(17))
    assert bundle.accuracy >= 0.98, "auxiliary classifier failed its own gate"
    return bundle


@pytest.fixture(scope="session")
def point_classifier(point_corpus):
    return train_classifier(point_corpus, np.random.default_rng(17))
