import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pathwise_mfc.model import build_problem
from pathwise_mfc.noise import PointPath

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def lq():
    return build_problem("lq1d", {})


@pytest.fixture(scope="session")
def two_jump_path():
    return PointPath.from_events(1.0, [(0.3, 1.0), (0.7, 1.0)])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
