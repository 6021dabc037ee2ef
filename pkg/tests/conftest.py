import numpy as np
import pytest

from dpalarm.config import default_scenario, reference_params


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def scenario():
    return default_scenario()


@pytest.fixture
def analog_params():
    return reference_params()


def random_psd(rng, d, eig_range=(1.0, 10.0)):
    """Random symmetric PSD matrix with spectrum inside eig_range."""
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    lam = rng.uniform(*eig_range, size=d)
    return (q * lam) @ q.T
