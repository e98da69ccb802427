"""Named experiment set-ups: chambers, scales, initial crowds, synthetic data."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Union

import numpy as np

from .directions import DirectionSet
from .errors import ConfigurationError
from .geometry import CircleChamber, Column, GeometryGrid, SquareChamber

SHAPES = ("circle", "circle_with_column", "square")
CIRCLE_EXITS = {"right": 0.0, "top": 90.0, "left": 180.0, "bottom": 270.0}


@dataclass(frozen=True)
class DiskRegion:
    center_mm: tuple[float, float]
    radius_mm: float

    def contains(self, x, y):
        cx, cy = self.center_mm
        return (x - cx) ** 2 + (y - cy) ** 2 <= self.radius_mm**2


@dataclass(frozen=True)
class SectorRegion:
    """Annular sector ``r_inner <= r <= r_outer`` within ``half_angle`` of ``center_angle``."""

    r_inner_mm: float
    r_outer_mm: float
    center_angle_deg: float
    half_angle_deg: float
    origin_mm: tuple[float, float] = (0.0, 0.0)

    def contains(self, x, y):
        dx = x - self.origin_mm[0]
        dy = y - self.origin_mm[1]
        r = np.hypot(dx, dy)
        phi = np.degrees(np.arctan2(dy, dx)) - self.center_angle_deg
        phi = (phi + 180.0) % 360.0 - 180.0
        return (r >= self.r_inner_mm) & (r <= self.r_outer_mm) & (np.abs(phi) <= self.half_angle_deg)


@dataclass(frozen=True)
class LuneRegion:
    """Points of ``outer`` that are not in ``cut``."""

    outer: DiskRegion
    cut: DiskRegion

    def contains(self, x, y):
        return self.outer.contains(x, y) & ~self.cut.contains(x, y)


Region = Union[DiskRegion, SectorRegion, LuneRegion]


@dataclass(frozen=True)
class Group:
    """A region of uniformly spread individuals.

    ``direction`` is the initial heading index; None defers to the scenario's
    quadrant rule.
    """

    region: Region
    direction: int | None = None


@dataclass(frozen=True)
class QuadrantDirections:
    """Heading by quadrant: the quadrant holding the exit gets ``near_exit``."""

    near_exit: int
    other: int


@dataclass(frozen=True)
class ScenarioSpec:
    """Physical description of one experiment plus its discretisation."""

    name: str
    shape: str
    size_mm: float
    exit_width_mm: float = 2.5
    exit_placement: str = "right"
    column_diameter_mm: float | None = None
    column_gap_mm: float | None = None
    ant_count: float = 200.0
    groups: tuple[Group, ...] = ()
    quadrant_rule: QuadrantDirections | None = None
    max_speed_mm_s: float = 2.0
    max_density_per_mm2: float = 0.5
    length_scale_mm: float | None = None
    dx_mm: float = 1.0
    dy_mm: float = 1.0
    dt_s: float = 0.5
    horizon_s: float = 20.0
    cfl_override: bool = True

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ConfigurationError(f"unknown chamber shape {self.shape!r}")
        for name in ("size_mm", "exit_width_mm", "max_speed_mm_s", "max_density_per_mm2",
                     "dx_mm", "dy_mm", "dt_s"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.horizon_s < 0 or self.ant_count < 0:
            raise ConfigurationError("horizon and ant count must be nonnegative")
        if self.shape == "circle_with_column":
            if not (self.column_diameter_mm and self.column_diameter_mm > 0):
                raise ConfigurationError("column scenario needs a positive column diameter")
            if self.column_gap_mm is None or self.column_gap_mm < 0:
                raise ConfigurationError("column scenario needs a nonnegative column gap")
        if self.shape == "square" and self.exit_placement != "upper-right":
            raise ConfigurationError("square chambers support exit_placement='upper-right' only")
        if self.shape != "square" and self.exit_placement not in CIRCLE_EXITS:
            raise ConfigurationError(
                f"circle exit placement must be one of {sorted(CIRCLE_EXITS)}"
            )

    @property
    def characteristic_length_mm(self) -> float:
        if self.length_scale_mm is not None:
            return self.length_scale_mm
        return self.size_mm * math.sqrt(2) if self.shape == "square" else self.size_mm

    @property
    def reference_time_s(self) -> float:
        return self.characteristic_length_mm / self.max_speed_mm_s

    def chamber(self):
        if self.shape == "square":
            return SquareChamber(side=self.size_mm, exit_width=self.exit_width_mm)
        radius = 0.5 * self.size_mm
        angle = math.radians(CIRCLE_EXITS[self.exit_placement])
        columns = ()
        if self.shape == "circle_with_column":
            r = 0.5 * self.column_diameter_mm
            dist = radius - self.column_gap_mm - r
            columns = (Column((dist * math.cos(angle), dist * math.sin(angle)), r),)
        return CircleChamber(radius=radius, exit_width=self.exit_width_mm, exit_angle=angle,
                             columns=columns)

    def with_overrides(self, **changes) -> "ScenarioSpec":
        return replace(self, **changes)


# ---------------------------------------------------------------------------
# presets

CIRCLE_DISK = DiskRegion(center_mm=(-7.0, 0.0), radius_mm=9.0)
CIRCLE_CRESCENT = SectorRegion(r_inner_mm=10.0, r_outer_mm=16.5, center_angle_deg=0.0,
                               half_angle_deg=65.0)
COLUMN_CRESCENT = LuneRegion(outer=DiskRegion((0.0, 0.0), 16.5),
                             cut=DiskRegion((-14.0, 0.0), 15.0))
_DIAG = 1.0 / math.sqrt(2)
SQUARE_DISK = DiskRegion(center_mm=(-7.0 * _DIAG, -7.0 * _DIAG), radius_mm=9.0)
SQUARE_CRESCENT = SectorRegion(r_inner_mm=10.0, r_outer_mm=16.5, center_angle_deg=45.0,
                               half_angle_deg=65.0)


def _preset(name: str) -> ScenarioSpec:
    if name == "circle":
        return ScenarioSpec(
            name="circle", shape="circle", size_mm=35.0,
            groups=(Group(CIRCLE_DISK, 0), Group(CIRCLE_CRESCENT, 4)),
        )
    if name == "circle-column":
        return ScenarioSpec(
            name="circle-column", shape="circle_with_column", size_mm=35.0,
            column_diameter_mm=5.0, column_gap_mm=2.0,
            groups=(Group(COLUMN_CRESCENT, 0),),
        )
    if name == "square":
        return ScenarioSpec(
            name="square", shape="square", size_mm=31.0, exit_placement="upper-right",
            groups=(Group(SQUARE_DISK), Group(SQUARE_CRESCENT)),
            quadrant_rule=QuadrantDirections(near_exit=5, other=1),
        )
    raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")


PRESETS = ("circle", "circle-column", "square")


def preset(name: str, **overrides) -> ScenarioSpec:
    """A built-in scenario, optionally with fields replaced."""
    spec = _preset(name)
    return replace(spec, **overrides) if overrides else spec


# ---------------------------------------------------------------------------
# scales


class Scales(NamedTuple):
    dx: float
    dy: float
    dt: float
    reference_time_s: float
    length_mm: float
    speed_mm_s: float
    density_per_mm2: float


def nondimensionalize(spec: ScenarioSpec) -> Scales:
    """Dimensionless cell sizes and time step, plus the scales used."""
    D = spec.characteristic_length_mm
    T = D / spec.max_speed_mm_s
    return Scales(spec.dx_mm / D, spec.dy_mm / D, spec.dt_s / T, T, D,
                  spec.max_speed_mm_s, spec.max_density_per_mm2)


def dimensionalize(scales: Scales) -> dict:
    """Physical cell sizes, time step and reference time from ``scales``."""
    D = scales.length_mm
    T = D / scales.speed_mm_s
    return {
        "dx_mm": scales.dx * D,
        "dy_mm": scales.dy * D,
        "dt_s": scales.dt * T,
        "reference_time_s": T,
        "max_density_per_mm2": scales.density_per_mm2,
    }


# ---------------------------------------------------------------------------
# initial data


def initial_state(spec: ScenarioSpec, grid: GeometryGrid) -> np.ndarray:
    """Distribution with ``spec.ant_count`` individuals spread over the groups.

    Every group shares one uniform density; a cell belongs to the first
    group whose region contains its centre.
    """
    nd = grid.directions.n_d
    f = np.zeros((nd,) + grid.spec.shape)
    if spec.ant_count == 0:
        return f
    D = grid.spec.characteristic_length_mm
    XX, YY = grid.spec.centers()
    XX, YY = XX * D, YY * D
    active = grid.active
    heading = np.full(grid.spec.shape, -1, dtype=np.int64)
    for g in spec.groups:
        inside = g.region.contains(XX, YY) & active & (heading < 0)
        if g.direction is not None:
            d = np.full(grid.spec.shape, g.direction)
        elif spec.quadrant_rule is not None:
            ex, ey = grid.chamber.exit_midpoint
            near = (np.sign(XX) == np.sign(ex)) & (np.sign(YY) == np.sign(ey))
            d = np.where(near, spec.quadrant_rule.near_exit, spec.quadrant_rule.other)
        else:
            raise ConfigurationError("group without a direction and no quadrant rule")
        if np.any((d < 0) | (d >= nd)):
            raise ConfigurationError("initial direction index out of range")
        heading = np.where(inside, d, heading)
    occupied = heading >= 0
    n = int(occupied.sum())
    if n == 0:
        raise ConfigurationError("initial layout covers no walkable cell")
    rho0 = spec.ant_count / (grid.spec.heads_per_unit_density() * grid.spec.cell_area * n)
    if rho0 > 1.0:
        raise ConfigurationError(
            f"{spec.ant_count:g} individuals on {n} cells needs density {rho0:.3f} > 1"
        )
    j, i = np.nonzero(occupied)
    f[heading[j, i], j, i] = rho0
    return f


def build(spec: ScenarioSpec, directions: DirectionSet | None = None):
    """Geometry and initial distribution for ``spec``."""
    from .geometry import build_geometry

    grid = build_geometry(spec, directions)
    return grid, initial_state(spec, grid)


def time_grid(spec: ScenarioSpec, stride: int = 1):
    from .forward import TimeGrid

    s = nondimensionalize(spec)
    n = int(round(spec.horizon_s / spec.dt_s))
    if abs(n * spec.dt_s - spec.horizon_s) > 1e-9 * max(1.0, spec.horizon_s):
        raise ConfigurationError("horizon must be a multiple of the time step")
    return TimeGrid(s.dt, n, stride)


def make_synthetic(spec: ScenarioSpec, eps_true: float, time=None, **kwargs):
    """Density frames from a forward run at uniform stress ``eps_true``."""
    return synthetic_run(spec, eps_true, time, **kwargs)[0]


def synthetic_run(spec: ScenarioSpec, eps_true: float, time=None, *, grid=None, f0=None,
                  quantize: float | None = None, threads: int = 1):
    """Observation frames plus the forward trajectory that produced them.

    ``quantize`` rounds frames to multiples of the given step, emulating
    coarse observations; by default frames keep full precision.
    """
    from .forward import run_forward
    from .inverse import ObservationSeries

    if not 0.0 <= eps_true <= 1.0:
        raise ConfigurationError(f"eps_true={eps_true} outside [0, 1]")
    if grid is None:
        grid, f_init = build(spec)
        f0 = f_init if f0 is None else f0
    elif f0 is None:
        f0 = initial_state(spec, grid)
    time = time or time_grid(spec)
    traj = run_forward(f0, eps_true, grid, time, cfl_override=spec.cfl_override, threads=threads)
    frames = [d.copy() for d in traj.densities[1:]]
    if quantize:
        frames = [np.clip(np.round(fr / quantize) * quantize, 0.0, 1.0) for fr in frames]
    return ObservationSeries(times=traj.times[1:].copy(), frames=frames, stride=time.stride,
                             dt=time.dt), traj
