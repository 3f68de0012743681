import numpy as np
import pytest

from generality.precision import set_precision


@pytest.fixture(autouse=True)
def default_f64():
    """Unit tests run 64-bit unless they opt into f32 themselves."""
    set_precision("f64")
    yield
    set_precision("f64")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
