import math
import os
import warnings

import numpy as np
import pytest

from qtstream.calibration import calibrate
from qtstream.partition import build_partition

# Repeated pytest runs reuse calibration tables through this directory
# when QTSTREAM_TEST_CACHE is set; results are identical either way
# because calibration is deterministic in its parameters.
CACHE = os.environ.get("QTSTREAM_TEST_CACHE")


def cached_calibrate(**kwargs):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        return calibrate(cache_dir=CACHE, **kwargs)


@pytest.fixture(scope="session")
def small_table():
    """Cheap table for unit tests: K=4, N=16, ARL0=50."""
    return cached_calibrate(
        arl0_target=50, lam=0.03, k=4, n_train=16, replicates=20_000, length=60, seed=0,
        fit_degree=5,
    )


@pytest.fixture(scope="session")
def small_update_table():
    """Cheap table for the adaptive variant: beta=5, budget S=96."""
    return cached_calibrate(
        arl0_target=50, lam=0.03, k=4, n_train=16, beta=5.0, stop_at=96,
        replicates=20_000, length=60, seed=0, fit_degree=5,
    )


@pytest.fixture(scope="session")
def small_partition():
    rng = np.random.default_rng(42)
    return build_partition(rng.random((16, 2)), np.full(4, 0.25), 42)
