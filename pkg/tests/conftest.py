import os
import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sohbag.features import build_feature_table, window_for
from sohbag.synthetic import SyntheticFleetSpec, generate_synthetic_fleet

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=500, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_fleet():
    return generate_synthetic_fleet(SyntheticFleetSpec(cell_count=10, cycles_per_cell=12, seed=3))


@pytest.fixture(scope="session")
def small_table(small_fleet):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        return build_feature_table(small_fleet, window_for("LFP"))
