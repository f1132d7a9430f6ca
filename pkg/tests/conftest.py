import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains a model; minutes of CPU time")


@pytest.fixture
def np_rng():
    import numpy as np

    return np.random.default_rng(1234)
