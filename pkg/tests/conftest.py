import numpy as np
import pytest

from config import GeneratorSettings
from simulator import build_generative_model, generate_impressions

TINY_USERS = 60
TINY_ITEMS = 50
TINY_CATEGORIES = 6


@pytest.fixture
def tiny_settings():
    return GeneratorSettings(
        n_users=TINY_USERS,
        n_items=TINY_ITEMS,
        n_categories=TINY_CATEGORIES,
        latent_dim=4,
        train_impressions=2000,
        test_impressions=500,
        calibration_pairs=20_000,
        seed=7,
    )


@pytest.fixture
def tiny_world(tiny_settings):
    """Uncalibrated generator: zero biases keep every label class well populated."""
    return build_generative_model(tiny_settings)


@pytest.fixture
def tiny_log(tiny_world):
    return generate_impressions(tiny_world, 0, 400)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
