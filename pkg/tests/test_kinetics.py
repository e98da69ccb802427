import math

import numpy as np
import pytest

from kincrowd.directions import DirectionSet, angular_distance
from kincrowd.errors import DomainError
from kincrowd.geometry import box_geometry
from kincrowd.kinetics import (b_vector, blend_angle_and_rate, congestion_direction,
                               congestion_field, density_of, interaction_direction,
                               interaction_terms, speed, table_A, table_A_field, table_B,
                               table_B_local, tent_with_derivative)

from conftest import random_distribution

DIRS = DirectionSet()
U = DIRS.unit_vectors


# ---------------------------------------------------------------------------
# density and speed


def test_density_examples():
    f = np.zeros((8, 2, 2))
    assert np.all(density_of(f) == 0)
    f[0] = 0.1
    assert np.allclose(density_of(f), 0.1)
    assert np.allclose(density_of(np.full((8, 2, 2), 1 / 8)), 1.0)


@pytest.mark.parametrize("rho, v", [(0.0, 1.0), (0.1, 1.0), (0.2, 1.0), (0.6, 0.5), (1.0, 0.0)])
def test_speed_examples(rho, v):
    assert speed(rho) == pytest.approx(v, abs=1e-15)


def test_speed_is_monotone_and_smooth_at_the_knee():
    r = np.linspace(0, 1, 2001)
    v = speed(r)
    assert np.all(np.diff(v) <= 1e-15)
    h = 1e-6
    assert (speed(0.2 + h) - speed(0.2)) / h == pytest.approx(0.0, abs=1e-4)
    assert (speed(1.0) - speed(1.0 - h)) / h == pytest.approx(0.0, abs=1e-4)


@pytest.mark.parametrize("rho", [-0.01, 1.01, float("nan")])
def test_speed_rejects_out_of_range_density(rho):
    with pytest.raises(DomainError):
        speed(rho)


# ---------------------------------------------------------------------------
# geometric table


def test_table_A_on_a_lattice_direction_is_a_unit_column():
    theta = np.repeat(DIRS.angles[3], 8)[:, None]
    A = table_A_field(theta, DIRS)[0]  # (i, h)
    assert np.allclose(A[3], 1.0)
    assert np.allclose(np.delete(A, 3, axis=0), 0.0)


def test_table_A_midway_splits_evenly():
    theta = np.full((8, 1), DIRS.angles[1] + math.pi / 8)
    A = table_A_field(theta, DIRS)[0]
    assert A[1, 0] == pytest.approx(0.5) and A[2, 0] == pytest.approx(0.5)


def test_table_A_columns_sum_to_one(circle):
    _, grid, _ = circle
    for c in np.argwhere(grid.active)[::37]:
        A = table_A(grid, tuple(c))
        assert np.allclose(A.sum(axis=0), 1.0, atol=1e-12)


# ---------------------------------------------------------------------------
# congestion direction


def test_constant_density_keeps_own_direction():
    g = box_geometry(7, 7)
    C = congestion_field(np.full((7, 7), 0.4), g)
    for h in range(8):
        assert np.all(C[h, 1:-1, 1:-1] == h)


def test_ramp_density_turns_toward_the_decreasing_side():
    g = box_geometry(7, 7)
    x, _ = g.spec.centers()
    rho = x / x.max()
    # theta_h = pi/2: the derivative along 3pi/4 is negative, along pi/4 positive
    assert congestion_direction(rho, g, (3, 3), 2) == 3


def test_rising_density_ahead_is_avoided():
    g = box_geometry(7, 7)
    x, _ = g.spec.centers()
    rho = 0.1 + 0.1 * x / x.max()
    # theta_0 = 0 points up the ramp; both neighbours rise less, tie broken by geometry
    assert congestion_direction(rho, g, (3, 3), 0) in (1, 7)


# ---------------------------------------------------------------------------
# interaction direction and table


def test_interaction_direction_limits():
    assert np.allclose(interaction_direction(0, 2, 5, 0.0), U[5])
    assert np.allclose(interaction_direction(0, 2, 5, 1.0), U[2])
    assert np.allclose(interaction_direction(0, 0, 2, 0.5), [math.sqrt(0.5), math.sqrt(0.5)])


def test_interaction_direction_opposite_blend_falls_back_to_congestion():
    assert np.allclose(interaction_direction(0, 0, 4, 0.5), U[4])


def test_interaction_direction_rejects_bad_stress():
    with pytest.raises(DomainError):
        interaction_direction(0, 0, 0, 1.5)


def test_table_B_at_zero_stress_follows_congestion():
    C = np.array([1, 1, 3, 2, 5, 4, 7, 0])
    B, _ = table_B_local(C, 0.0, DIRS)
    for h in range(8):
        assert np.allclose(B[C[h], h, :], 1.0)


def test_table_B_at_unit_stress_follows_the_field_individual():
    C = np.arange(8)
    B, _ = table_B_local(C, 1.0, DIRS)
    for k in range(8):
        assert np.allclose(B[k, :, k], 1.0)


def test_table_B_rows_are_stochastic():
    rng = np.random.default_rng(5)
    for _ in range(200):
        C = (np.arange(8) + rng.integers(-1, 2, 8)) % 8
        B, dB = table_B_local(C, rng.random(), DIRS)
        assert np.allclose(B.sum(axis=0), 1.0, atol=1e-12)
        assert np.all(np.abs(dB.sum(axis=0)) <= 1e-12 * max(1.0, np.abs(dB).max()))
        assert np.all(B >= 0)


def _cone_margin(eps, uk, uc):
    theta, _ = blend_angle_and_rate(eps, uk, uc)
    d = angular_distance(theta, DIRS.angles)
    return np.min(np.minimum(np.abs(d), np.abs(d - math.pi / 4)))


def test_dB_matches_central_differences():
    rng = np.random.default_rng(11)
    h_fd = 1e-5
    checked = 0
    while checked < 1000:
        k, c = rng.integers(0, 8, 2)
        eps = rng.uniform(0.02, 0.98)
        uk, uc = U[k], U[c]
        if abs(float(np.dot(uk, uc)) + 1) < 1e-9 or _cone_margin(eps, uk, uc) < 1e-3:
            continue
        th, rate = blend_angle_and_rate(eps, uk, uc)
        _, dB = tent_with_derivative(th, rate, DIRS)
        Bp, _ = tent_with_derivative(blend_angle_and_rate(eps + h_fd, uk, uc)[0], 0.0, DIRS)
        Bm, _ = tent_with_derivative(blend_angle_and_rate(eps - h_fd, uk, uc)[0], 0.0, DIRS)
        assert np.max(np.abs(dB - (Bp - Bm) / (2 * h_fd))) <= 1e-6
        checked += 1


def _closed_form_dB(eps, uF, uC, ui):
    """Derivative through arccos(u_P . u_i), written out in dot products."""
    FC, Fi, Ci = uF @ uC, uF @ ui, uC @ ui
    num = eps * (FC - 1) * (Fi + Ci) + Fi - Ci * FC
    den = (-2 * eps**2 * FC + 2 * eps * FC + 2 * eps**2 - 2 * eps + 1) ** 1.5
    w = eps * uF + (1 - eps) * uC
    x = (w / np.linalg.norm(w)) @ ui
    return 4 / math.pi / math.sqrt(1 - x * x) * num / den


def test_dB_agrees_with_the_dot_product_closed_form():
    rng = np.random.default_rng(2)
    n = 0
    while n < 300:
        k, c = rng.integers(0, 8, 2)
        eps = rng.uniform(0.05, 0.95)
        if abs(U[k] @ U[c] + 1) < 1e-9 or _cone_margin(eps, U[k], U[c]) < 1e-3:
            continue
        th, rate = blend_angle_and_rate(eps, U[k], U[c])
        B, dB = tent_with_derivative(th, rate, DIRS)
        for i in np.nonzero(B > 0)[0]:
            assert dB[i] == pytest.approx(_closed_form_dB(eps, U[k], U[c], U[i]), abs=1e-9)
        n += 1


def test_table_B_on_grid_matches_local(circle):
    _, grid, f0 = circle
    rho = f0.sum(axis=0)
    B, dB = table_B(grid, rho, 0.3, (17, 17))
    C = congestion_field(rho, grid)[:, 17, 17]
    B2, dB2 = table_B_local(C, 0.3, DIRS)
    assert np.array_equal(B, B2) and np.array_equal(dB, dB2)


def test_table_B_rejects_bad_stress(circle):
    _, grid, f0 = circle
    with pytest.raises(DomainError):
        table_B(grid, f0.sum(axis=0), 1.2, (17, 17))


# ---------------------------------------------------------------------------
# gains and interaction terms


def test_b_vector_identities():
    rng = np.random.default_rng(7)
    C = np.arange(8)
    B, _ = table_B_local(C, 0.4, DIRS)
    assert np.all(b_vector(np.zeros(8), B) == 0)
    f = random_distribution(rng, (), max_rho=0.9)
    assert b_vector(f, B).sum() == pytest.approx(f.sum() ** 2, abs=1e-14)
    single = np.zeros(8)
    single[3] = 0.7
    assert np.allclose(b_vector(single, B), 0.49 * B[:, 3, 3])


def test_interaction_terms_are_mass_neutral():
    rng = np.random.default_rng(8)
    for _ in range(200):
        f = random_distribution(rng, ())
        rho = f.sum()
        A = table_A_field(rng.uniform(0, 2 * math.pi, (8, 1)), DIRS)[0]
        B, _ = table_B_local((np.arange(8) + rng.integers(-1, 2, 8)) % 8, rng.random(), DIRS)
        I = interaction_terms(f, rho, A, b_vector(f, B))
        assert abs(I.sum()) <= 1e-12


def test_interaction_terms_special_cases():
    A = np.eye(8)
    B, _ = table_B_local(np.arange(8), 0.5, DIRS)
    assert np.all(interaction_terms(np.zeros(8), 0.0, A, np.zeros(8)) == 0)
    f = np.full(8, 1 / 8)
    b = b_vector(f, B)
    assert np.allclose(interaction_terms(f, 1.0, A, b), b - f)
