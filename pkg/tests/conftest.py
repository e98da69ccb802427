import numpy as np
import pytest

from kincrowd.scenarios import build, preset, time_grid


@pytest.fixture(scope="session")
def circle():
    spec = preset("circle")
    grid, f0 = build(spec)
    return spec, grid, f0


@pytest.fixture(scope="session")
def square():
    spec = preset("square")
    grid, f0 = build(spec)
    return spec, grid, f0


@pytest.fixture(scope="session")
def column():
    spec = preset("circle-column")
    grid, f0 = build(spec)
    return spec, grid, f0


@pytest.fixture(scope="session")
def circle_twin(circle):
    """Synthetic circle data at eps = 0.95 and the trajectory behind it."""
    from kincrowd.scenarios import synthetic_run

    spec, grid, f0 = circle
    tg = time_grid(spec)
    obs, traj = synthetic_run(spec, 0.95, tg, grid=grid, f0=f0)
    return obs, traj, tg


def random_distribution(rng, shape, nd=8, max_rho=1.0):
    """Admissible random distribution of shape (nd, *shape)."""
    f = rng.random((nd,) + tuple(shape))
    rho = rng.random(shape) * max_rho
    return f / f.sum(axis=0) * rho
