import numpy as np
import pytest

import tnml.tensor

tnml.tensor.DEBUG_CHECKS = True


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
