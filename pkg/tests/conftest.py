import numpy as np
import pytest

from icasift.tensor import using_dtype


@pytest.fixture
def f64():
    """Run the engine in float64 so finite differences have headroom."""
    with using_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
