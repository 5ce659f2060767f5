import numpy as np
import pytest

from deepembed.perf import tune_malloc

tune_malloc()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
