"""
Pytest configuration and fixtures for the toolkit tests.
"""
import os
import sys

import pytest

# Add the project root to the Python path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import config as config_module
from services.service_manager import service_manager
from tests.test_helpers import MARKOV_MATRIX, SKEWED, SRW, make_model
from rwre_toolkit.tools.environment import realize

# Settings variables a developer shell might export; tests start from defaults
SETTINGS_VARIABLES = [
    "LOGGING__LEVEL", "LOG_LEVEL", "LOGGING__FORMAT", "LOG_FORMAT",
    "SIMULATION__WORKERS", "RWRE_WORKERS",
    "SIMULATION__CHUNK_SIZE", "RWRE_CHUNK_SIZE",
    "SIMULATION__DP_HORIZON", "RWRE_DP_HORIZON",
    "SIMULATION__PRUNE_THRESHOLD", "RWRE_PRUNE_THRESHOLD",
    "SIMULATION__REJECTION_BUDGET_FACTOR", "RWRE_REJECTION_BUDGET_FACTOR",
    "SIMULATION__MAX_REJECTION_PROPOSALS", "RWRE_MAX_REJECTION_PROPOSALS",
    "SIMULATION__CENSOR_FLAG_FRACTION", "RWRE_CENSOR_FLAG_FRACTION",
    "SIMULATION__PRECISION_FLOOR", "RWRE_PRECISION_FLOOR",
    "SIMULATION__MAX_TABLE_CELLS", "RWRE_MAX_TABLE_CELLS",
    "STATISTICS__P_THRESHOLD", "RWRE_P_THRESHOLD",
    "STATISTICS__EXACT_P_THRESHOLD", "RWRE_EXACT_P_THRESHOLD",
    "STATISTICS__SE_MULTIPLIER", "RWRE_SE_MULTIPLIER",
    "STATISTICS__RATIO_BAND", "RWRE_RATIO_BAND",
]


def pytest_configure(config):
    """Register custom markers."""
    config.addinivalue_line("markers", "integration: mark test as integration test")
    config.addinivalue_line("markers", "unit: mark test as unit test")
    config.addinivalue_line("markers", "slow: mark test as slow running")


@pytest.fixture(autouse=True)
def clean_settings(monkeypatch):
    """
    Every test starts from default settings and a single-worker pool.
    """
    for name in SETTINGS_VARIABLES:
        monkeypatch.delenv(name, raising=False)
    config_module.config = None
    service_manager.reset_for_tests(workers=1)
    yield
    service_manager.shutdown()
    config_module.config = None


@pytest.fixture
def srw_model():
    """Degenerate environment: the simple symmetric walk at every time."""
    return make_model("iid-alphabet", [SRW])


@pytest.fixture
def skewed_model():
    """Single law {(-2, 1/3), (+1, 2/3)}."""
    return make_model("iid-alphabet", [SKEWED])


@pytest.fixture
def mixed_model():
    """I.i.d. letters over {SRW, skewed} with weights (0.5, 0.5)."""
    return make_model("iid-alphabet", [SRW, SKEWED], weights=[0.5, 0.5])


@pytest.fixture
def periodic_model():
    """Deterministic rotation SRW, skewed, SRW, skewed, ..."""
    return make_model("periodic", [SRW, SKEWED], order=[0, 1])


@pytest.fixture
def markov_model():
    """Two-state Markov chain over {SRW, skewed}."""
    return make_model("markov-alphabet", [SRW, SKEWED], matrix=MARKOV_MATRIX)


@pytest.fixture
def srw_env(srw_model):
    return realize(srw_model, 1)


@pytest.fixture
def skewed_env(skewed_model):
    return realize(skewed_model, 1)


@pytest.fixture
def mixed_env(mixed_model):
    return realize(mixed_model, 42)


@pytest.fixture
def periodic_env(periodic_model):
    return realize(periodic_model, 1)


@pytest.fixture
def markov_env(markov_model):
    return realize(markov_model, 5)
