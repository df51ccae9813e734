import os

# single-core timings for the acceptance runtimes
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from brainmvp import synthgen


@pytest.fixture(scope="session")
def small_dataset():
    """Ten default synthetic studies (16^3, three modalities) with 6:1:3 splits."""
    return synthgen.gen_dataset(synthgen.GenConfig(), 10)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
