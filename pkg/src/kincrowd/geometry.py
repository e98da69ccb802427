"""Structured mesh over a chamber and the geometric fields the tables need.

Coordinates are in millimetres with the chamber centred at the origin until
the very end of :func:`build_geometry`, where distances are divided by the
characteristic length ``D`` and clamped to [0, 1].

Field arrays use numpy image order: scalar fields are ``(ny, nx)`` and
per-direction fields are ``(n_d, ny, nx)``; a cell index is ``(row, col)``
with ``row`` increasing with ``y``.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .directions import DirectionSet, wrap_angle
from .errors import ConfigurationError

NORM_FLOOR = 1e-9


class CellKind(enum.IntEnum):
    WALL = 0
    WALKABLE = 1
    OBSTACLE = 2
    EXIT = 3


@dataclass(frozen=True)
class GridSpec:
    """Dimensionless mesh description plus the physical scales behind it."""

    dx: float
    dy: float
    nx: int
    ny: int
    origin: tuple[float, float]
    characteristic_length_mm: float
    max_speed_mm_s: float = 2.0
    max_density_per_mm2: float = 0.5

    def __post_init__(self):
        if not (self.dx > 0 and self.dy > 0):
            raise ConfigurationError("cell widths must be positive")
        if self.nx < 2 or self.ny < 2:
            raise ConfigurationError("grid needs at least 2 cells per axis")
        if not (self.characteristic_length_mm > 0 and self.max_speed_mm_s > 0):
            raise ConfigurationError("characteristic length and speed must be positive")
        if not self.max_density_per_mm2 > 0:
            raise ConfigurationError("maximum density must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def reference_time_s(self) -> float:
        return self.characteristic_length_mm / self.max_speed_mm_s

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Dimensionless cell-centre coordinates, each of shape (ny, nx)."""
        x = self.origin[0] + self.dx * np.arange(self.nx)
        y = self.origin[1] + self.dy * np.arange(self.ny)
        return np.meshgrid(x, y)

    def heads_per_unit_density(self) -> float:
        """Number of individuals represented by unit integrated density."""
        return self.max_density_per_mm2 * self.characteristic_length_mm**2


# ---------------------------------------------------------------------------
# continuous chamber shapes (millimetres)


@dataclass(frozen=True)
class RayHit:
    distance: float
    point: tuple[float, float]
    tangent: tuple[float, float]
    through_exit: bool


class Chamber(Protocol):
    exit_midpoint: tuple[float, float]
    exit_normal: tuple[float, float]

    def inside(self, x, y): ...

    def bounding_box(self) -> tuple[float, float, float, float]: ...

    def on_exit(self, point) -> bool: ...

    def project(self, point) -> tuple[float, float]: ...

    def raycast(self, origin, direction) -> RayHit: ...


def _ray_circle_exit(p, u, center, radius):
    """Positive root of |p + t u - c| = r for p inside the circle."""
    ox, oy = p[0] - center[0], p[1] - center[1]
    b = ox * u[0] + oy * u[1]
    c = ox * ox + oy * oy - radius * radius
    disc = b * b - c
    return -b + math.sqrt(max(disc, 0.0))


def _ray_circle_entry(p, u, center, radius):
    """Smallest positive root for p outside the circle, or inf on a miss."""
    ox, oy = p[0] - center[0], p[1] - center[1]
    b = ox * u[0] + oy * u[1]
    c = ox * ox + oy * oy - radius * radius
    disc = b * b - c
    if disc <= 0.0:
        return math.inf
    t = -b - math.sqrt(disc)
    return t if t > 0.0 else math.inf


def _ccw_tangent(point, center):
    rx, ry = point[0] - center[0], point[1] - center[1]
    n = math.hypot(rx, ry)
    return (-ry / n, rx / n)


@dataclass(frozen=True)
class Column:
    """Circular obstacle inside the chamber."""

    center: tuple[float, float]
    radius: float

    def inside(self, x, y):
        return (x - self.center[0]) ** 2 + (y - self.center[1]) ** 2 <= self.radius**2


@dataclass(frozen=True)
class CircleChamber:
    """Disk of the given radius with one exit arc centred at ``exit_angle``."""

    radius: float
    exit_width: float
    exit_angle: float = 0.0
    columns: tuple[Column, ...] = ()

    def __post_init__(self):
        if not (0 < self.exit_width < 2 * self.radius):
            raise ConfigurationError("exit width must lie in (0, diameter)")

    @property
    def exit_half_angle(self) -> float:
        return math.asin(0.5 * self.exit_width / self.radius)

    @property
    def exit_normal(self):
        return (math.cos(self.exit_angle), math.sin(self.exit_angle))

    @property
    def exit_midpoint(self):
        n = self.exit_normal
        return (self.radius * n[0], self.radius * n[1])

    def inside(self, x, y):
        x = np.asarray(x)
        y = np.asarray(y)
        ok = x * x + y * y < self.radius**2
        for col in self.columns:
            ok &= ~col.inside(x, y)
        return ok

    def bounding_box(self):
        r = self.radius
        return (-r, r, -r, r)

    def on_exit(self, point) -> bool:
        phi = math.atan2(point[1], point[0]) - self.exit_angle
        phi = (phi + math.pi) % (2 * math.pi) - math.pi
        return abs(phi) <= self.exit_half_angle + 1e-12

    def project(self, point):
        n = math.hypot(point[0], point[1])
        if n == 0.0:
            return self.exit_midpoint
        return (self.radius * point[0] / n, self.radius * point[1] / n)

    def raycast(self, origin, direction):
        return _raycast_with_columns(self, origin, direction, self._outer_hit)

    def _outer_hit(self, p, u):
        t = _ray_circle_exit(p, u, (0.0, 0.0), self.radius)
        q = (p[0] + t * u[0], p[1] + t * u[1])
        return t, q, _ccw_tangent(q, (0.0, 0.0))


@dataclass(frozen=True)
class SquareChamber:
    """Axis-aligned square with the exit cut across its upper-right corner.

    The exit is a chamfer of length ``exit_width`` perpendicular to the
    diagonal, so each of the two walls loses ``exit_width / sqrt(2)``.
    """

    side: float
    exit_width: float
    columns: tuple[Column, ...] = ()

    def __post_init__(self):
        if not (0 < self.exit_width / math.sqrt(2) < self.side):
            raise ConfigurationError("exit width must fit on the corner walls")

    @property
    def half(self) -> float:
        return 0.5 * self.side

    @property
    def exit_leg(self) -> float:
        return self.exit_width / math.sqrt(2)

    @property
    def exit_normal(self):
        s = 1.0 / math.sqrt(2)
        return (s, s)

    @property
    def exit_midpoint(self):
        c = self.half - 0.5 * self.exit_leg
        return (c, c)

    def inside(self, x, y):
        x = np.asarray(x)
        y = np.asarray(y)
        h = self.half
        ok = (np.abs(x) < h) & (np.abs(y) < h)
        for col in self.columns:
            ok &= ~col.inside(x, y)
        return ok

    def bounding_box(self):
        h = self.half
        return (-h, h, -h, h)

    def on_exit(self, point) -> bool:
        h, e = self.half, self.exit_leg
        x, y = point
        tol = 1e-9
        on_top = abs(y - h) <= tol and x >= h - e - tol
        on_right = abs(x - h) <= tol and y >= h - e - tol
        return on_top or on_right

    def project(self, point):
        h = self.half
        x, y = point
        gaps = {"right": h - x, "left": x + h, "top": h - y, "bottom": y + h}
        side = min(gaps, key=gaps.get)
        if side == "right":
            return (h, y)
        if side == "left":
            return (-h, y)
        if side == "top":
            return (x, h)
        return (x, -h)

    def raycast(self, origin, direction):
        return _raycast_with_columns(self, origin, direction, self._outer_hit)

    def _outer_hit(self, p, u):
        h = self.half
        best = (math.inf, None)
        for axis, tangent in ((0, (0.0, 1.0)), (1, (1.0, 0.0))):
            if u[axis] > 0:
                t = (h - p[axis]) / u[axis]
            elif u[axis] < 0:
                t = (-h - p[axis]) / u[axis]
            else:
                continue
            if t < best[0]:
                best = (t, tangent)
        t, tangent = best
        q = (p[0] + t * u[0], p[1] + t * u[1])
        return t, q, tangent


def _raycast_with_columns(chamber, p, u, outer_hit) -> RayHit:
    t, q, tangent = outer_hit(p, u)
    through_exit = chamber.on_exit(q)
    for col in chamber.columns:
        tc = _ray_circle_entry(p, u, col.center, col.radius)
        if tc < t:
            t = tc
            q = (p[0] + t * u[0], p[1] + t * u[1])
            tangent = _ccw_tangent(q, col.center)
            through_exit = False
    if through_exit:
        return RayHit(t, q, tangent, True)
    # orient the tangent so that walking along it approaches the exit
    ex, ey = chamber.exit_midpoint
    if tangent[0] * (ex - q[0]) + tangent[1] * (ey - q[1]) < 0.0:
        tangent = (-tangent[0], -tangent[1])
    return RayHit(t, q, tangent, False)


# ---------------------------------------------------------------------------
# rasterised geometry


@dataclass(frozen=True, eq=False)
class GeometryGrid:
    """Cell classification plus precomputed, time-independent geometry.

    All distance fields are dimensionless (divided by ``D``) and clamped to
    [0, 1]. Entries on non-walkable cells are zero (vectors: zero as well).
    """

    spec: GridSpec
    kinds: np.ndarray
    d_exit: np.ndarray
    u_exit: np.ndarray
    d_wall: np.ndarray
    u_wall: np.ndarray
    theta_G: np.ndarray
    directions: DirectionSet
    chamber: Chamber | None = field(default=None, repr=False)
    exit_links: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), dtype=np.int64))

    def __post_init__(self):
        if self.exit_links.size and not np.all(self.kinds[self.exit_links[:, 0],
                                                          self.exit_links[:, 1]] == CellKind.EXIT):
            raise ConfigurationError("exit links must start on exit cells")
        for name in ("kinds", "d_exit", "u_exit", "d_wall", "u_wall", "theta_G", "exit_links"):
            getattr(self, name).setflags(write=False)

    @property
    def open_ghost(self) -> np.ndarray:
        """Padded (ny+2, nx+2) mask of the open cells just beyond the exit."""
        mask = np.zeros((self.spec.ny + 2, self.spec.nx + 2), dtype=bool)
        if self.exit_links.size:
            el = self.exit_links
            mask[el[:, 0] + el[:, 2] + 1, el[:, 1] + el[:, 3] + 1] = True
        return mask

    @property
    def active(self) -> np.ndarray:
        """Cells that carry mass: walkable interior cells and exit cells."""
        return (self.kinds == CellKind.WALKABLE) | (self.kinds == CellKind.EXIT)

    @property
    def exit_mask(self) -> np.ndarray:
        return self.kinds == CellKind.EXIT

    @property
    def n_active(self) -> int:
        return int(self.active.sum())

    @property
    def area(self) -> float:
        """Dimensionless measure of the walkable region."""
        return self.n_active * self.spec.cell_area

    def cell_center_mm(self, cell) -> tuple[float, float]:
        j, i = cell
        s = self.spec
        d = s.characteristic_length_mm
        return ((s.origin[0] + i * s.dx) * d, (s.origin[1] + j * s.dy) * d)


def rasterize(chamber, dx_mm: float, dy_mm: float, characteristic_length_mm: float,
              max_speed_mm_s: float = 2.0, max_density_per_mm2: float = 0.5):
    """Cover the chamber's bounding box with cells and classify them."""
    xmin, xmax, ymin, ymax = chamber.bounding_box()
    nx = max(2, int(math.ceil((xmax - xmin) / dx_mm - 1e-9)))
    ny = max(2, int(math.ceil((ymax - ymin) / dy_mm - 1e-9)))
    x0 = 0.5 * (xmin + xmax) - 0.5 * (nx - 1) * dx_mm
    y0 = 0.5 * (ymin + ymax) - 0.5 * (ny - 1) * dy_mm
    d = characteristic_length_mm
    spec = GridSpec(
        dx=dx_mm / d,
        dy=dy_mm / d,
        nx=nx,
        ny=ny,
        origin=(x0 / d, y0 / d),
        characteristic_length_mm=d,
        max_speed_mm_s=max_speed_mm_s,
        max_density_per_mm2=max_density_per_mm2,
    )
    X = x0 + dx_mm * np.arange(nx)
    Y = y0 + dy_mm * np.arange(ny)
    XX, YY = np.meshgrid(X, Y)

    kinds = np.full((ny, nx), CellKind.WALL, dtype=np.int8)
    in_outer = type(chamber)(**{**_shape_kwargs(chamber), "columns": ()}).inside(XX, YY)
    kinds[in_outer] = CellKind.WALKABLE
    for col in chamber.columns:
        kinds[in_outer & col.inside(XX, YY)] = CellKind.OBSTACLE

    walk = kinds == CellKind.WALKABLE
    outside = ~in_outer
    padded = np.pad(outside, 1, constant_values=True)
    boundary_adjacent = (
        padded[1:-1, :-2] | padded[1:-1, 2:] | padded[:-2, 1:-1] | padded[2:, 1:-1]
    )
    for j, i in zip(*np.nonzero(walk & boundary_adjacent)):
        q = chamber.project((XX[j, i], YY[j, i]))
        if chamber.on_exit(q):
            kinds[j, i] = CellKind.EXIT
    if not np.any(kinds == CellKind.EXIT):
        raise ConfigurationError(
            "grid too coarse to represent the exit: no boundary cell projects onto it"
        )
    return spec, kinds


def _shape_kwargs(chamber):
    if isinstance(chamber, CircleChamber):
        return dict(radius=chamber.radius, exit_width=chamber.exit_width,
                    exit_angle=chamber.exit_angle)
    if isinstance(chamber, SquareChamber):
        return dict(side=chamber.side, exit_width=chamber.exit_width)
    raise ConfigurationError(f"unsupported chamber type {type(chamber).__name__}")


def ray_to_wall(chamber, point_mm, theta: float, characteristic_length_mm: float):
    """Dimensionless distance to the wall hit along ``theta`` and the wall tangent.

    Rays leaving through the exit report ``d_wall = 1`` (no collision) and a
    ``None`` tangent; callers substitute any unit vector since its weight is 0.
    """
    u = (math.cos(theta), math.sin(theta))
    hit = chamber.raycast(point_mm, u)
    if hit.through_exit:
        return 1.0, None
    d = min(max(hit.distance / characteristic_length_mm, 0.0), 1.0)
    return d, np.array(hit.tangent)


def preferred_angle_field(d_exit, u_exit, d_wall, u_wall):
    """Angle of the normalised blend (1-d_E) u_E + (1-d_W) u_W.

    Vectorised over leading axes; falls back to the angle of ``u_exit`` where
    the blend's norm is below ``NORM_FLOOR``.
    """
    d_exit = np.asarray(d_exit, dtype=float)
    d_wall = np.asarray(d_wall, dtype=float)
    u_exit = np.asarray(u_exit, dtype=float)
    u_wall = np.asarray(u_wall, dtype=float)
    w = (1.0 - d_exit)[..., None] * u_exit + (1.0 - d_wall)[..., None] * u_wall
    norm = np.hypot(w[..., 0], w[..., 1])
    theta = np.arctan2(w[..., 1], w[..., 0])
    fallback = np.arctan2(u_exit[..., 1], u_exit[..., 0])
    theta = np.where(norm < NORM_FLOOR, fallback, theta)
    return wrap_angle(theta)


def wall_collision(grid: GeometryGrid, cell, h: int):
    """Ray-cast from the centre of ``cell`` along direction ``h``.

    Returns ``(d_wall, u_wall)`` with ``d_wall`` dimensionless in [0, 1] and
    ``u_wall`` the exit-ward unit tangent at the hit point. A ray leaving
    through the exit gives ``d_wall = 1`` and ``u_wall = u_exit`` of the cell.
    """
    if grid.chamber is None:
        raise ConfigurationError("grid has no continuous chamber to ray-cast against")
    if not grid.active[cell]:
        raise ConfigurationError(f"cell {cell} is not walkable")
    d, u = ray_to_wall(grid.chamber, grid.cell_center_mm(cell),
                       float(grid.directions.angles[h]), grid.spec.characteristic_length_mm)
    if u is None:
        u = np.array(grid.u_exit[cell])
    return d, u


def geometric_preferred_angle(grid: GeometryGrid, cell, h: int) -> float:
    """Geometric preferred angle of direction ``h`` at ``cell``, in [0, 2*pi)."""
    if not grid.active[cell]:
        raise ConfigurationError(f"cell {cell} is not walkable")
    j, i = cell
    return float(preferred_angle_field(grid.d_exit[j, i], grid.u_exit[j, i],
                                       grid.d_wall[h, j, i], grid.u_wall[h, j, i]))


def build_geometry(scenario, directions: DirectionSet | None = None) -> GeometryGrid:
    """Rasterise ``scenario``'s chamber and precompute every geometric field."""
    directions = directions or DirectionSet()
    chamber = scenario.chamber()
    D = scenario.characteristic_length_mm
    spec, kinds = rasterize(
        chamber, scenario.dx_mm, scenario.dy_mm, D,
        scenario.max_speed_mm_s, scenario.max_density_per_mm2,
    )
    ny, nx = spec.shape
    nd = directions.n_d
    XX, YY = spec.centers()
    XX = XX * D
    YY = YY * D

    active = (kinds == CellKind.WALKABLE) | (kinds == CellKind.EXIT)
    exits = np.argwhere(kinds == CellKind.EXIT)
    exit_pts = np.stack([XX[exits[:, 0], exits[:, 1]], YY[exits[:, 0], exits[:, 1]]], axis=1)

    d_exit = np.zeros((ny, nx))
    u_exit = np.zeros((ny, nx, 2))
    d_wall = np.zeros((nd, ny, nx))
    u_wall = np.zeros((nd, ny, nx, 2))
    theta_G = np.zeros((nd, ny, nx))
    normal = np.array(chamber.exit_normal, dtype=float)

    for j, i in zip(*np.nonzero(active)):
        p = np.array([XX[j, i], YY[j, i]])
        if kinds[j, i] == CellKind.EXIT:
            d_exit[j, i] = 0.0
            u_exit[j, i] = normal
        else:
            diff = exit_pts - p
            dist = np.hypot(diff[:, 0], diff[:, 1])
            k = int(np.argmin(dist))
            d_exit[j, i] = min(dist[k] / D, 1.0)
            u_exit[j, i] = diff[k] / dist[k]
        for h, th in enumerate(directions.angles):
            dw, uw = ray_to_wall(chamber, (p[0], p[1]), th, D)
            d_wall[h, j, i] = dw
            u_wall[h, j, i] = u_exit[j, i] if uw is None else uw

    for h in range(nd):
        theta_G[h] = preferred_angle_field(d_exit, u_exit, d_wall[h], u_wall[h])
    theta_G[:, ~active] = 0.0

    return GeometryGrid(
        spec=spec,
        kinds=kinds,
        d_exit=d_exit,
        u_exit=u_exit,
        d_wall=d_wall,
        u_wall=u_wall,
        theta_G=theta_G,
        directions=directions,
        chamber=chamber,
        exit_links=find_exit_links(chamber, spec, kinds),
    )


def find_exit_links(chamber, spec: GridSpec, kinds) -> np.ndarray:
    """Lattice links from exit cells that leave the chamber through the exit.

    Rows are ``(row, col, d_row, d_col)``. A link qualifies when its target is
    not walkable (and not an obstacle) and the segment between the two cell
    centres crosses the boundary on the exit.
    """
    D = spec.characteristic_length_mm
    dx_mm, dy_mm = spec.dx * D, spec.dy * D
    XX, YY = spec.centers()
    ny, nx = spec.shape
    links = []
    for j, i in np.argwhere(kinds == CellKind.EXIT):
        p = (XX[j, i] * D, YY[j, i] * D)
        for oy in (-1, 0, 1):
            for ox in (-1, 0, 1):
                if oy == 0 and ox == 0:
                    continue
                tj, ti = j + oy, i + ox
                if 0 <= tj < ny and 0 <= ti < nx and kinds[tj, ti] != CellKind.WALL:
                    continue
                step = (ox * dx_mm, oy * dy_mm)
                length = math.hypot(*step)
                hit = chamber.raycast(p, (step[0] / length, step[1] / length))
                if hit.through_exit and hit.distance <= length:
                    links.append((j, i, oy, ox))
    return np.array(links, dtype=np.int64).reshape(-1, 4)


def sealed(grid: GeometryGrid) -> GeometryGrid:
    """Copy of ``grid`` with the exit closed (exit cells stay walkable)."""
    return dataclasses.replace(grid, exit_links=np.zeros((0, 4), dtype=np.int64))


def box_geometry(nx: int, ny: int, dx: float = 0.05, dy: float | None = None,
                 directions: DirectionSet | None = None, theta_G=None) -> GeometryGrid:
    """Closed rectangular box of walkable cells with no exit.

    Used for conservation tests and reduced problems; the geometric preferred
    direction is supplied directly (default: direction 0 everywhere).
    """
    directions = directions or DirectionSet()
    dy = dx if dy is None else dy
    spec = GridSpec(dx=dx, dy=dy, nx=nx, ny=ny, origin=(0.0, 0.0),
                    characteristic_length_mm=1.0)
    nd = directions.n_d
    kinds = np.full((ny, nx), CellKind.WALKABLE, dtype=np.int8)
    if theta_G is None:
        theta_G = np.zeros((nd, ny, nx))
    theta_G = np.broadcast_to(np.asarray(theta_G, dtype=float), (nd, ny, nx)).copy()
    ones = np.ones((ny, nx))
    unit = np.zeros((ny, nx, 2))
    unit[..., 0] = 1.0
    return GeometryGrid(
        spec=spec,
        kinds=kinds,
        d_exit=ones.copy(),
        u_exit=unit,
        d_wall=np.ones((nd, ny, nx)),
        u_wall=np.broadcast_to(unit, (nd, ny, nx, 2)).copy(),
        theta_G=theta_G,
        directions=directions,
    )
