import numpy as np
import pytest

from saps.config import Settings
from saps.core import symmetrize_bandwidth


def _complete_bandwidth(n: int, speed: float = 100.0):
    return symmetrize_bandwidth(np.full((n, n), speed))


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.fixture
def settings():
    return Settings(ROUND_TIMEOUT_S=30.0, CONNECT_TIMEOUT_S=5.0, BANDWIDTH_REPORT_INTERVAL_S=0.0)


@pytest.fixture
def complete_bandwidth():
    return _complete_bandwidth


@pytest.fixture
def quadratic_config():
    return {
        "n": 4,
        "N": 16,
        "T": 20,
        "c": 2,
        "gamma": 0.2,
        "master_seed": 11,
        "objective": {"kind": "quadratic", "spread": 0.5},
    }
