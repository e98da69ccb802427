import math

import numpy as np
import pytest

from kincrowd.geometry import (CellKind, CircleChamber, SquareChamber, box_geometry,
                               geometric_preferred_angle, preferred_angle_field, ray_to_wall,
                               wall_collision)
from kincrowd.forward import cfl_check
from kincrowd.scenarios import nondimensionalize, preset


def test_circle_raster_matches_disk_area(circle):
    _, grid, _ = circle
    assert grid.spec.shape == (35, 35)
    # about pi * 17.5^2 = 962 cells of 1 mm^2
    assert abs(grid.n_active - math.pi * 17.5**2) < 0.02 * math.pi * 17.5**2
    assert 2 <= int(grid.exit_mask.sum()) <= 3


def test_square_raster(square):
    _, grid, _ = square
    assert grid.spec.shape == (31, 31)
    assert grid.n_active == 31 * 31
    assert 2 <= int(grid.exit_mask.sum()) <= 3


def test_exit_cells_have_zero_exit_distance(circle):
    _, grid, _ = circle
    assert np.all(grid.d_exit[grid.exit_mask] == 0.0)
    n = np.hypot(grid.u_exit[..., 0], grid.u_exit[..., 1])
    assert np.allclose(n[grid.active], 1.0)


@pytest.mark.parametrize("fixture", ["circle", "square", "column"])
def test_exit_distance_matches_brute_force(fixture, request):
    spec, grid, _ = request.getfixturevalue(fixture)
    D = spec.characteristic_length_mm
    XX, YY = grid.spec.centers()
    ex = np.argwhere(grid.exit_mask)
    pts = np.stack([XX[ex[:, 0], ex[:, 1]], YY[ex[:, 0], ex[:, 1]]], 1)
    for j, i in np.argwhere(grid.active):
        brute = min(math.hypot(XX[j, i] - px, YY[j, i] - py) for px, py in pts)
        assert grid.d_exit[j, i] == pytest.approx(min(brute, 1.0), abs=1e-12)


def test_square_far_corner_is_unit_distance_from_exit():
    # the far corner sits a diagonal (minus the chamfer) from the exit; D = 31 sqrt(2)
    spec = preset("square")
    chamber = spec.chamber()
    D = spec.characteristic_length_mm
    ex, ey = chamber.exit_midpoint
    far = (-15.5, -15.5)
    d = math.hypot(ex - far[0], ey - far[1]) / D
    corner = math.hypot(31.0, 31.0) / D
    assert corner == pytest.approx(1.0)
    assert d == pytest.approx(1.0, abs=0.06)


def test_wall_ray_toward_exit_reports_no_collision():
    chamber = CircleChamber(radius=17.5, exit_width=2.5)
    d, tangent = ray_to_wall(chamber, (0.0, 0.0), 0.0, 35.0)
    assert d == 1.0 and tangent is None


def test_wall_tangent_in_square_is_exit_ward():
    chamber = SquareChamber(side=31.0, exit_width=2.5)
    # from the centre straight down: flat wall, tangent must point toward +x (exit side)
    d, t = ray_to_wall(chamber, (0.0, 0.0), -math.pi / 2, 31 * math.sqrt(2))
    assert d == pytest.approx(15.5 / (31 * math.sqrt(2)))
    assert t[1] == pytest.approx(0.0, abs=1e-12) and t[0] == pytest.approx(1.0)
    d, t = ray_to_wall(chamber, (0.0, 0.0), math.pi, 31 * math.sqrt(2))
    assert t[0] == pytest.approx(0.0, abs=1e-12) and t[1] == pytest.approx(1.0)


def test_wall_distance_next_to_wall_is_small(circle):
    _, grid, _ = circle
    j, i = 17, 0  # leftmost walkable cell on the centre row
    assert grid.active[j, i]
    d, _ = wall_collision(grid, (j, i), 4)
    assert d <= 1.0 / 35


def test_raycast_agrees_with_stored_fields(circle):
    _, grid, _ = circle
    rng = np.random.default_rng(3)
    cells = np.argwhere(grid.active)
    for c in cells[rng.choice(len(cells), 40, replace=False)]:
        for h in range(8):
            d, u = wall_collision(grid, tuple(c), h)
            assert d == grid.d_wall[h, c[0], c[1]]
            assert np.allclose(u, grid.u_wall[h, c[0], c[1]])


def test_circle_ray_through_exit_gives_unit_wall_distance(circle):
    _, grid, _ = circle
    j = 17
    for i in range(35):
        if grid.active[j, i]:
            assert grid.d_wall[0, j, i] == 1.0


def test_preferred_angle_limits():
    uE = np.array([1.0, 0.0])
    uW = np.array([0.0, 1.0])
    assert preferred_angle_field(1.0, uE, 0.3, uW) == pytest.approx(math.pi / 2)
    assert preferred_angle_field(0.4, uE, 1.0, uW) == pytest.approx(0.0)
    assert preferred_angle_field(0.5, uE, 0.5, uW) == pytest.approx(math.pi / 4)


def test_preferred_angle_degenerate_falls_back_to_exit():
    uE = np.array([0.0, -1.0])
    assert preferred_angle_field(1.0, uE, 1.0, np.array([1.0, 0.0])) == pytest.approx(
        3 * math.pi / 2)


def test_geometric_preferred_angle_matches_field(circle):
    _, grid, _ = circle
    assert geometric_preferred_angle(grid, (17, 17), 3) == grid.theta_G[3, 17, 17]


def test_cfl_bound_for_one_millimetre_cells(circle):
    _, grid, _ = circle
    assert cfl_check(grid) == pytest.approx(0.9 / 35)
    s = nondimensionalize(preset("circle"))
    assert s.dt == pytest.approx(0.5 / 17.5)
    assert s.dt > cfl_check(grid)


def test_geometry_is_read_only(circle):
    _, grid, _ = circle
    with pytest.raises(ValueError):
        grid.d_exit[0, 0] = 1.0


def test_box_geometry_has_no_exit():
    g = box_geometry(5, 4)
    assert g.spec.shape == (4, 5)
    assert g.exit_links.shape == (0, 4)
    assert np.all(g.kinds == CellKind.WALKABLE)
