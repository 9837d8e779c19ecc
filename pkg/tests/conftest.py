import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from masense.model import ArrayGeometry, ScenarioConfig, TargetSet, equal_power_sources

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

LAMBDA = 0.05


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_geometry(rng, n, half_width=0.15):
    return ArrayGeometry(rng.uniform(-half_width, half_width, (n, 2)))


def random_targets(rng, k, box=0.6, min_sep=0.05):
    while True:
        u = rng.uniform(-box, box, k)
        v = rng.uniform(-box, box, k)
        if np.any(u * u + v * v > 1):
            continue
        d = np.hypot(u[:, None] - u, v[:, None] - v) + np.eye(k) * 9
        if d.min() >= min_sep:
            return TargetSet(u, v)


def random_instance(rng, n, k, t, half_width=0.15):
    g = random_geometry(rng, n, half_width)
    tg = random_targets(rng, k)
    S = (rng.standard_normal((k, t)) + 1j * rng.standard_normal((k, t))) / np.sqrt(2)
    return g, tg, S


@pytest.fixture
def desk_scenario():
    return ScenarioConfig(num_antennas=8, num_targets=3, region_size=0.3, num_snapshots=16)
