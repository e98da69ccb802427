import math
import warnings

import numpy as np
import pytest

from kincrowd.errors import ConfigurationError, GridMismatchError, StabilityError
from kincrowd.forward import (ForwardModel, ForwardTrajectory, LinkTransport, TimeGrid,
                              cfl_check, forward_step, run_forward, transport_divergence)
from kincrowd.geometry import box_geometry, sealed
from kincrowd.scenarios import time_grid

from conftest import random_distribution


def test_time_grid():
    tg = TimeGrid.from_horizon(0.5, 20.0)
    assert tg.n_steps == 40 and tg.horizon == 20.0
    assert tg.times()[-1] == 20.0
    with pytest.raises(ConfigurationError):
        TimeGrid.from_horizon(0.3, 1.0)
    with pytest.raises(ConfigurationError):
        TimeGrid(0.0, 3)


def test_two_cell_upwind_hand_computation():
    g = box_geometry(3, 2, dx=0.1)
    tr = LinkTransport.from_grid(g)
    f = np.zeros((8, 2, 3))
    f[0, 0, 0] = 0.5  # eastward, neighbour empty so v(0) = 1
    dt = 0.05
    new, out = tr.apply(f, f.sum(axis=0), dt)
    moved = 0.5 * dt / 0.1
    assert new[0, 0, 0] == pytest.approx(0.5 - moved, abs=1e-15)
    assert new[0, 0, 1] == pytest.approx(moved, abs=1e-15)
    assert np.count_nonzero(new) == 2
    assert new.sum() == pytest.approx(0.5, abs=1e-15) and out == 0.0


def test_flux_uses_receiver_speed():
    g = box_geometry(3, 2, dx=0.1)
    tr = LinkTransport.from_grid(g)
    f = np.zeros((8, 2, 3))
    f[0, 0, 0] = 0.2
    f[4, 0, 1] = 0.6  # receiver at density 0.6 walks at half speed
    new, _ = tr.apply(f, f.sum(axis=0), 0.05)
    assert new[0, 0, 1] == pytest.approx(0.2 * 0.5 * 0.5, abs=1e-15)


def test_receiver_never_overfills():
    g = box_geometry(3, 2, dx=0.1)
    tr = LinkTransport.from_grid(g)
    f = np.zeros((8, 2, 3))
    f[0, 0, 0] = 1.0
    f[4, 0, 2] = 1.0
    f[0, 0, 1] = 0.15  # receiver nearly empty, two full donors push into it
    new, _ = tr.apply(f, f.sum(axis=0), 0.09)
    assert new.sum(axis=0).max() <= 1.0 + 1e-15
    assert new.sum() == pytest.approx(f.sum(), abs=1e-14)


def test_constant_state_has_no_periodic_divergence():
    g = box_geometry(6, 5)
    tr = LinkTransport.from_grid(g, periodic=True)
    f = np.broadcast_to(np.linspace(0.01, 0.08, 8)[:, None, None], (8, 5, 6)).copy()
    assert np.max(np.abs(tr.divergence(f, f.sum(axis=0)))) <= 1e-12


def test_closed_box_transport_conserves_mass():
    rng = np.random.default_rng(4)
    g = box_geometry(9, 7)
    tr = LinkTransport.from_grid(g)
    f = random_distribution(rng, (7, 9))
    m0 = f.sum()
    for _ in range(50):
        f, out = tr.apply(f, f.sum(axis=0), 0.04)
        assert out == 0.0
        assert abs(f.sum() - m0) <= 1e-12
    assert f.min() >= 0


def test_transport_divergence_matches_step(circle):
    _, grid, f0 = circle
    rho = f0.sum(axis=0)
    div = transport_divergence(f0, rho, grid)
    dt = 1e-4  # small enough that the capacity limiter stays idle
    new, out = LinkTransport.from_grid(grid).apply(f0, rho, dt)
    assert np.allclose(new, f0 - dt * div, atol=1e-15)


def test_zero_state_is_a_fixed_point(circle):
    _, grid, _ = circle
    f = np.zeros((8,) + grid.spec.shape)
    assert np.all(forward_step(f, 0.5, grid, 0.01) == 0)


def test_single_occupied_cell_stays_nonnegative(circle):
    _, grid, _ = circle
    f = np.zeros((8,) + grid.spec.shape)
    f[2, 17, 17] = 0.6
    new = forward_step(f, 0.3, grid, 0.5 * cfl_check(grid))
    assert new.min() >= 0.0
    assert new.sum(axis=0).max() <= 1.0


def test_closed_chamber_step_conserves_mass(circle):
    _, grid, f0 = circle
    g = sealed(grid)
    model = ForwardModel(g, 0.5 * cfl_check(g))
    f = f0
    for n in range(20):
        m = f.sum()
        f, out = model.step(f, 0.95)
        assert out == 0.0
        assert abs(f.sum() - m) <= 1e-12 * max(1.0, m)


def test_occupancy_plus_exited_is_constant(circle):
    spec, grid, f0 = circle
    traj = run_forward(f0, 0.95, grid, time_grid(spec), cfl_override=True)
    total = traj.occupancy + traj.exited
    assert np.allclose(total, 200.0, atol=1e-9)
    assert np.all(np.diff(traj.occupancy) <= 1e-12)


def test_cfl_guard_and_subcycling(circle):
    spec, grid, _ = circle
    dt = time_grid(spec).dt
    with pytest.raises(ConfigurationError):
        ForwardModel(grid, dt)
    with pytest.warns(UserWarning, match="sub-cycled in 2"):
        m = ForwardModel(grid, dt, cfl_override=True)
    assert m.substeps == 2
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert ForwardModel(grid, 0.5 * cfl_check(grid)).substeps == 1


def test_stability_error_reports_location(circle):
    _, grid, _ = circle
    model = ForwardModel(grid, 0.01)
    bad = np.zeros((model.n_cells, 8))
    bad[5, 3] = -1e-3
    with pytest.raises(StabilityError) as info:
        model._admissible(bad, 7)
    err = info.value
    assert err.step == 7 and err.direction == 3 and err.cell == model._cell_index(5)
    assert "step=7" in str(err)


def test_clamp_mode_projects():
    g = box_geometry(4, 4)
    model = ForwardModel(g, 0.01, clamp=True)
    bad = np.full((model.n_cells, 8), 0.2)
    bad[0, 0] = -0.1
    out = model._admissible(bad.copy(), 1)
    assert out.min() >= 0 and out.sum(axis=1).max() <= 1 + 1e-15


def test_zero_steps_gives_initial_snapshot_only(circle):
    _, grid, f0 = circle
    traj = run_forward(f0, 0.5, grid, TimeGrid(0.01, 0))
    assert len(traj.densities) == 1 and traj.times.tolist() == [0.0]
    assert np.array_equal(traj.final_state, f0)


def test_forward_is_deterministic(circle):
    spec, grid, f0 = circle
    tg = time_grid(spec.with_overrides(horizon_s=5.0))
    a = run_forward(f0, 0.95, grid, tg, cfl_override=True)
    b = run_forward(f0, 0.95, grid, tg, cfl_override=True)
    assert np.array_equal(a.final_state, b.final_state)


def test_schedules(circle):
    spec, grid, f0 = circle
    tg = time_grid(spec.with_overrides(horizon_s=2.0))
    a = run_forward(f0, 0.4, grid, tg, cfl_override=True)
    b = run_forward(f0, [0.4] * tg.n_steps, grid, tg, cfl_override=True)
    c = run_forward(f0, lambda n: np.full(grid.spec.shape, 0.4), grid, tg, cfl_override=True)
    assert np.array_equal(a.final_state, b.final_state)
    assert np.array_equal(a.final_state, c.final_state)


def test_shape_mismatch_is_rejected(circle):
    _, grid, _ = circle
    with pytest.raises(GridMismatchError):
        forward_step(np.zeros((8, 3, 3)), 0.5, grid, 0.01)


def test_exit_time_interpolates():
    traj = ForwardTrajectory(times=np.array([0.0]), densities=[], final_state=None,
                             step_times=np.array([0.0, 1.0, 2.0]),
                             occupancy=np.array([100.0, 80.0, 40.0]),
                             exited=np.array([0.0, 20.0, 60.0]), reference_time_s=10.0)
    assert traj.exit_time(50.0) == pytest.approx(17.5)
    assert math.isinf(traj.exit_time(70.0))
