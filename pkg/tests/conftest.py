import numpy as np
import pytest

from mfrflow import tensor as T


@pytest.fixture
def f64():
    with T.default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
