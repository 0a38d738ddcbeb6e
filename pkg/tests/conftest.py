import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from egofusion import data
from egofusion.tensor import default_dtype

settings.register_profile("ci", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


@pytest.fixture
def fp64():
    with default_dtype(np.float64):
        yield


@pytest.fixture(scope="session")
def synthetic_seq():
    return data.generate_synthetic(data.SyntheticSceneSpec(seed=0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
