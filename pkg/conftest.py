"""
Shared pytest fixtures: seeded RNG, small synthetic images and corpora, and
tiny trained models. Acceptance-scale experiments are marked slow and only
run with --runslow.
"""

import numpy as np
import pytest
import torch

from affect_regressor import TrainConfig, train_pixel_regressor
from denoiser import DenoiserTrainConfig, TinyDenoiser, train_tiny_denoiser
from imaging import Image, normalize_ratings
from noise_schedule import make_schedule
from synthetic_corpus import OracleRegressor, load_shapes_manifest, shape_images


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: acceptance-scale experiment (needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def random_image(rng):
    return Image(rng.random((24, 24, 3)))


@pytest.fixture(scope="session")
def shapes():
    return shape_images(12, size=32, seed=3)


@pytest.fixture(scope="session")
def shapes_manifest(tmp_path_factory):
    raw = load_shapes_manifest(tmp_path_factory.mktemp("shapes"), n=40, size=32, seed=5)
    return normalize_ratings(raw)


@pytest.fixture(scope="session")
def oracle():
    return OracleRegressor()


@pytest.fixture(scope="session")
def tiny_regressor(shapes_manifest):
    cfg = TrainConfig(epochs=3, batch_size=16, input_size=32, seed=0, patience=3)
    return train_pixel_regressor(shapes_manifest, cfg)


@pytest.fixture(scope="session")
def small_schedule():
    return make_schedule(50)


@pytest.fixture(scope="session")
def untrained_denoiser():
    torch.manual_seed(0)
    model = TinyDenoiser(image_size=16, base=8, text_dim=8, text_buckets=64, time_dim=16, train_steps=50)
    model.eval()
    model.mark_trained()
    return model


@pytest.fixture(scope="session")
def tiny_denoiser(shapes_manifest, small_schedule):
    cfg = DenoiserTrainConfig(epochs=2, batch_size=16, image_size=16, base_channels=8, seed=0)
    return train_tiny_denoiser(shapes_manifest, small_schedule, cfg)
