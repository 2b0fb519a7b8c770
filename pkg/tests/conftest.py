import numpy as np
import pytest


@pytest.fixture(autouse=True)
def _np_errstate():
    with np.errstate(over="ignore", under="ignore"):
        yield
