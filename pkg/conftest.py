import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: closed-loop and training runs taking more than a few seconds")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
