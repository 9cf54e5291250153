import numpy as np
import pytest

from midifill.tokens import LevelThresholds


@pytest.fixture
def th():
    return LevelThresholds.default()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
