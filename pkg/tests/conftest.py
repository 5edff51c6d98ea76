import numpy as np
import pytest

from sim4seg.harness import RunConfig, prepare


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_config():
    return RunConfig(count=8, train_count=8, seed=3)


@pytest.fixture(scope="session")
def small_prepared(small_config):
    """Fitted model plus evaluation samples, shared because fitting takes a moment."""
    return prepare(small_config)
