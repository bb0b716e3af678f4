import numpy as np
import pytest

from cxrseg import tensor as T


@pytest.fixture(autouse=True)
def f64_mode():
    """Tests run in 64-bit verification mode."""
    T.set_precision("f64")
    yield
    T.set_precision("f64")


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
