import numpy as np
import pytest
from hypothesis import settings

from rdeepc.data_engine import collect_offline_data
from rdeepc.harness import ControllerConfig

settings.register_profile("ci", deadline=None, max_examples=50)
settings.load_profile("ci")


@pytest.fixture(scope="session")
def dataset500():
    """One shared offline dataset large enough for full-rank prediction."""
    return collect_offline_data(500, 42)


@pytest.fixture(scope="session")
def cfg_default():
    return ControllerConfig()


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(7)
