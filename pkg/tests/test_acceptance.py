"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Tolerances are the contractual ones. Criteria that the model cannot meet
fail here rather than being relaxed.
"""

import dataclasses
import math
import time

import numpy as np
import pytest

from kincrowd.forward import ForwardModel, LinkTransport, TimeGrid, cfl_check, run_forward
from kincrowd.geometry import box_geometry
from kincrowd.inverse import DescentConfig, ObservationSeries, estimate, mismatch_functional
from kincrowd.scenarios import build, preset, synthetic_run, time_grid

from conftest import random_distribution

EPS_TRUE = 0.95


@pytest.fixture
def report(capsys):
    """Print one verdict line to the terminal, then enforce it."""

    def _report(number, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
        assert ok, f"criterion {number}: {detail}"

    return _report


def _seconds(res, T):
    return res.times * T


@pytest.fixture(scope="module")
def circle_runs(circle_twin, circle):
    spec, grid, f0 = circle
    obs, traj, tg = circle_twin
    t0 = time.perf_counter()
    unreg = estimate(f0, obs, grid, tg, DescentConfig(delta=50.0, tol=1e-5, eps0=0.05),
                     cfl_override=spec.cfl_override)
    elapsed = time.perf_counter() - t0
    reg = estimate(f0, obs, grid, tg,
                   DescentConfig(delta=50.0, tol=1e-5, eps0=0.05, eps_ref=0.75, xi=0.1),
                   cfl_override=spec.cfl_override)
    return unreg, reg, traj, elapsed, spec.reference_time_s


def test_criterion_1_unregularized_twin_recovery(circle_runs, report):
    unreg, _, _, elapsed, T = circle_runs
    t = _seconds(unreg, T)
    window = (t >= 2.0 - 1e-9) & (t <= 20.0 + 1e-9)
    worst = float(np.nanmax(unreg.mismatch_series[window]))
    ok = worst <= 5e-3 and elapsed < 60.0
    report(1, ok, f"max mismatch on [2, 20] s = {worst:.3e} (limit 5e-3), "
                  f"runtime {elapsed:.1f} s (limit 60 s)")


def test_criterion_2_regularization_benefit(circle_runs, report):
    unreg, reg, traj, _, T = circle_runs
    t = _seconds(unreg, T)
    late = t >= 5.0 - 1e-9
    j_reg = reg.functional_series[late]
    j_unreg = unreg.mismatch_series[late]
    bad = t[late][~(j_reg < j_unreg)]
    gap_unreg = float(np.max(np.abs(unreg.occupancy - traj.occupancy)))
    gap_reg = float(np.max(np.abs(reg.occupancy - traj.occupancy)))
    ok = bad.size == 0 and gap_reg < gap_unreg
    where = f"violated at t = {', '.join(f'{v:g}' for v in bad)} s" if bad.size else "holds"
    report(2, ok, f"J+R < J_unreg for t >= 5 s {where}; occupancy gap "
                  f"{gap_unreg:.3f} -> {gap_reg:.3f}")


@pytest.mark.parametrize("name, target, tol", [("circle", 21.1, 5.0), ("square", 12.9, 3.0)])
def test_criterion_3_evacuation_timing(name, target, tol, report):
    spec = preset(name)
    grid, f0 = build(spec)
    traj = run_forward(f0, EPS_TRUE, grid, time_grid(spec), cfl_override=spec.cfl_override)
    t50 = traj.exit_time(50.0)
    ok = abs(t50 - target) <= tol
    report(3, ok, f"{name}: 50th exit at {t50:.2f} s (target {target} +- {tol} s), "
                  f"{traj.exited[-1]:.2f} out by {spec.horizon_s:g} s")


def test_criterion_4_column_occupancy_gap(column, report):
    spec, grid, f0 = column
    tg = time_grid(spec)
    obs, traj = synthetic_run(spec, EPS_TRUE, tg, grid=grid, f0=f0)
    res = estimate(f0, obs, grid, tg,
                   DescentConfig(delta=50.0, tol=1e-5, eps0=0.05, eps_ref=0.5, xi=0.1),
                   cfl_override=spec.cfl_override)
    gap = abs(traj.occupancy[-1] - res.occupancy[-1])
    report(4, gap <= 8.0, f"occupancy at 20 s: synthetic {traj.occupancy[-1]:.2f}, "
                          f"estimated {res.occupancy[-1]:.2f}, gap {gap:.3f} (limit 8)")


def test_criterion_5_perfect_data_fixed_point(circle, circle_twin, report):
    spec, grid, f0 = circle
    obs, _, tg = circle_twin
    res = estimate(f0, obs, grid, tg, DescentConfig(eps0=EPS_TRUE, xi=0.0),
                   cfl_override=spec.cfl_override)
    first = bool(np.all(res.iterations_per_step == 0) and np.all(res.converged))
    worst = float(np.max(res.residual_per_step))
    report(5, first and worst < 1e-12,
           f"all steps converged on the first check: {first}, max residual {worst:.2e}")


def test_criterion_6_property_subset(report):
    import test_kinetics
    import test_properties as P

    checks = [P.test_geometric_table_columns_sum_to_one,
              P.test_interaction_table_columns_sum_to_one,
              P.test_interaction_terms_cancel,
              P.test_closed_box_conserves_mass_over_1000_steps,
              P.test_adjoint_components_are_identical,
              P.test_stress_stays_in_unit_interval,
              test_kinetics.test_dB_matches_central_differences,
              P.test_snapshot_round_trip]
    failed = []
    for check in checks:
        try:
            check()
        except AssertionError:
            failed.append(check.__name__)
    report(6, not failed, f"{len(checks) - len(failed)}/{len(checks)} properties hold"
                          + (f"; failing: {failed}" if failed else ""))


def _strip_problem(seed=7, nx=12, n_steps=10):
    rng = np.random.default_rng(seed)
    # the smallest admissible grid thickness is two cells
    grid = box_geometry(nx, 2, theta_G=rng.uniform(0, 2 * math.pi, (8, 2, nx)))
    frozen = dataclasses.replace(LinkTransport.from_grid(grid), src=np.zeros(0, np.int64),
                                 dst=np.zeros(0, np.int64), dirn=np.zeros(0, np.int64),
                                 rate=np.zeros(0), is_sink=np.zeros(0, bool))
    dt = 0.5 * cfl_check(grid)
    model = ForwardModel(grid, dt, transport=frozen)
    f0 = random_distribution(rng, (2, nx), max_rho=0.9)
    return grid, model, f0, TimeGrid(dt, n_steps)


def test_criterion_7_scalar_recovery_oracle(report):
    eps_star = 0.6
    grid, model, f0, tg = _strip_problem()
    traj = run_forward(f0, eps_star, grid, tg, model=model)
    obs = ObservationSeries(times=traj.times[1:], frames=traj.densities[1:], dt=tg.dt)

    scan = np.round(np.arange(0, 1001) * 1e-3, 12)
    values = []
    for e in scan:
        f, total = f0, 0.0
        for k in range(tg.n_steps):
            f, _ = model.step(f, e)
            total += mismatch_functional(f.sum(axis=0), obs.frames[k], grid)
        values.append(total)
    eps_scan = float(scan[int(np.argmin(values))])

    res = estimate(f0, obs, grid, tg, DescentConfig(eps0=0.05, max_iters=500), model=model)
    recovered = float(np.nanmean(res.eps_history[-1]))
    spread = float(np.ptp(values))
    ok = abs(recovered - eps_scan) <= 0.05 and abs(recovered - eps_star) <= 0.05
    report(7, ok, f"recovered {recovered:.4f}, scan minimiser {eps_scan:.3f}, "
                  f"true {eps_star}, functional range over the scan {spread:.2e}")
