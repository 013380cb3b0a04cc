import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from exitdpp.dp import SpaceGrid, cfl_steps, solve  # noqa: E402
from exitdpp.paths import TimeMesh  # noqa: E402
from exitdpp.problem import interval, make_spec  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def bm_spec(T=10.0, f="1"):
    return make_spec(T, interval(-1, 1), ["0"], ["1"], f)


def controlled_spec(T=2.0, f="1", levels=(([-1.0], [1.0]),), counts=((3,),)):
    return make_spec(T, interval(-1, 1), ["u1"], ["1"], f, list(levels), [list(c) for c in counts])


def solve_cfl(spec, spacing, store_every=None, max_slices=2001, level=None):
    space = SpaceGrid.from_domain(spec.domain, spacing=spacing)
    n = cfl_steps(spec, space, level)
    return solve(spec, space, TimeMesh(0.0, spec.T, n), level, store_every, max_slices)


@pytest.fixture(scope="session")
def bm_grid():
    """Reference problem at dx = 1/200, CFL-limited dt."""
    return solve_cfl(bm_spec(), 1 / 200, store_every=200)


@pytest.fixture(scope="session")
def bm_grid_coarse():
    return solve_cfl(bm_spec(), 1 / 50)


@pytest.fixture(scope="session")
def controlled_grid():
    return solve_cfl(controlled_spec(), 1 / 100)


@pytest.fixture
def rng_np():
    return np.random.default_rng(12345)
