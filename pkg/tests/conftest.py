import numpy as np
import pytest

from ugatit.tensor import set_precision


@pytest.fixture(autouse=True)
def _default_precision():
    set_precision("float32")
    yield
    set_precision("float32")


@pytest.fixture
def f64():
    set_precision("float64")
    yield np.float64


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
