import os

import numpy as np
import pytest

# Results must not depend on the worker count, so tests run with a single evaluation thread
os.environ["HEATSEG_THREADS"] = "1"


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
