import numpy as np
import pytest
from hypothesis import settings

from segcal.data import SyntheticConfig, generate_synthetic

settings.register_profile("segcal", deadline=None, max_examples=60)
settings.load_profile("segcal")


@pytest.fixture(scope="session")
def calibrated():
    return generate_synthetic(SyntheticConfig(num_images=20, seed=11))


@pytest.fixture(scope="session")
def overconfident():
    return generate_synthetic(SyntheticConfig(num_images=20, sharpness=3.0, seed=12))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
