import numpy as np
import pytest

from nsqp.spectral import make_grid


@pytest.fixture
def rng():
    return np.random.default_rng(20260815)


@pytest.fixture
def grid8():
    return make_grid(2.0 * np.pi, 8)


@pytest.fixture
def grid16():
    return make_grid(2.0 * np.pi, 16)
