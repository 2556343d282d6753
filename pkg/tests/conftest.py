import numpy as np
import pytest

from sknet.models.arch import build
from sknet.services.gradcheck import toy_spec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_net():
    return build(toy_spec(), seed=3)


@pytest.fixture
def images(rng):
    """Eight random 3x12x12 images in [0, 1]."""
    return rng.uniform(0.0, 1.0, (8, 3, 12, 12))
