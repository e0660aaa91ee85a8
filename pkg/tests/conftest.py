"""
Pytest configuration and shared fixtures.
"""

import logging
import sys
from pathlib import Path

import numpy as np
import pytest

# Add src to path for all tests
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from madiff.scheduler import make_schedule  # noqa: E402

from tests.test_helpers import gaussian_model, random_image  # noqa: E402


def pytest_configure(config):
    """Configure pytest with custom markers."""
    config.addinivalue_line(
        "markers", "slow: marks tests as slow (deselect with '-m \"not slow\"')"
    )
    config.addinivalue_line("markers", "performance: marks tests as performance tests")


@pytest.fixture
def schedule():
    """Short linear schedule keeping chain tests fast."""
    return make_schedule(50, 1e-3, 0.2)


@pytest.fixture
def full_schedule():
    return make_schedule(1000, 1e-4, 0.02)


@pytest.fixture
def image():
    return random_image(0, (16, 16, 3))


@pytest.fixture
def oracle(schedule):
    """Exact Gaussian predictor with distinct domain statistics."""
    return gaussian_model(schedule, (16, 16, 3))


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def reset_package_logger():
    """Drop handlers the CLI or setup_logging attached during a test."""
    yield
    root = logging.getLogger("madiff")
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()
    root.setLevel(logging.NOTSET)
