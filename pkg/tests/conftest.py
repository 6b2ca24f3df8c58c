import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def calib_dir(tmp_path_factory):
    """Shared calibration cache for engine tests (override with EDGEFED_TEST_CACHE)."""
    path = os.environ.get("EDGEFED_TEST_CACHE")
    return path or str(tmp_path_factory.mktemp("calib"))


@pytest.fixture(scope="session")
def small_setup(calib_dir):
    """Config-2 federation with the default calibrated broker model."""
    from edgefed.engine import EngineConfig, calibrate
    from edgefed.federation import build_config
    from edgefed.simulator import SimConfig

    spec = build_config(2)
    sim = SimConfig()
    cfg = EngineConfig()
    return spec, sim, cfg, calibrate(spec, sim, cfg, calib_dir)
