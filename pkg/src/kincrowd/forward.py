"""Explicit time stepping of the kinetic model.

One step advances ``f`` by donor-cell transport followed by the interaction
update evaluated at the pre-transport state::

    f_new = T(f) + dt * [(1 - rho)(A f - f) - rho^2 f] + dt * rho * b(f, eps)

The bracket does not depend on the stress level, so :class:`ForwardModel`
splits a step into :meth:`ForwardModel.prepare` (everything independent of
``eps``) and :meth:`ForwardModel.complete`. The inverse solver reuses one
prepared step for every descent iteration.
"""

from __future__ import annotations

import math
import warnings
import weakref
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigurationError, GridMismatchError, StabilityError
from .geometry import GeometryGrid
from .kinetics import TOL_RHO, congestion_field, table_A_field

CFL_SAFETY = 0.9
V_MAX = 1.0


@dataclass(frozen=True)
class TimeGrid:
    """Uniform dimensionless time stepping with observations every ``stride`` steps."""

    dt: float
    n_steps: int
    stride: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigurationError("time step must be positive")
        if self.n_steps < 0:
            raise ConfigurationError("number of steps must be nonnegative")
        if self.stride < 1:
            raise ConfigurationError("observation stride must be at least 1")

    @classmethod
    def from_horizon(cls, dt: float, horizon: float, stride: int = 1) -> "TimeGrid":
        n = int(round(horizon / dt))
        if abs(n * dt - horizon) > 1e-9 * max(1.0, horizon):
            raise ConfigurationError(f"horizon {horizon} is not a multiple of dt {dt}")
        return cls(dt, n, stride)

    @property
    def horizon(self) -> float:
        return self.n_steps * self.dt

    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)


def cfl_check(grid: GeometryGrid, dt: float | None = None) -> float:
    """Largest stable time step ``0.9 * min(dx, dy) / v_max``."""
    del dt
    return CFL_SAFETY * min(grid.spec.dx, grid.spec.dy) / V_MAX


# ---------------------------------------------------------------------------
# transport


@dataclass(frozen=True, eq=False)
class LinkTransport:
    """Donor-cell upwinding along lattice links on a once-padded grid.

    Direction ``u = (c, s)`` is split into a diagonal link with rate
    ``min(|c|/dx, |s|/dy)`` and axis links carrying the remainder, so the
    fraction of ``f^i`` leaving a cell per step is
    ``dt * v * max(|c|/dx, |s|/dy)``. Links into closed cells are dropped
    (zero flux through walls); a diagonal link is also dropped when both
    cells it would cut past are closed. Links listed as exit links discharge
    out of the domain.
    """

    ny: int
    nx: int
    src: np.ndarray
    dst: np.ndarray
    dirn: np.ndarray
    rate: np.ndarray
    is_sink: np.ndarray
    interior: np.ndarray = field(repr=False)

    @property
    def padded_size(self) -> int:
        return (self.ny + 2) * (self.nx + 2)

    @classmethod
    def from_grid(cls, grid: GeometryGrid, periodic: bool = False) -> "LinkTransport":
        spec = grid.spec
        ny, nx = spec.shape
        active = grid.active
        sinks = {tuple(int(v) for v in row) for row in grid.exit_links}
        u = grid.directions.unit_vectors
        pw = nx + 2

        def pidx(j, i):
            return (j + 1) * pw + (i + 1)

        def is_open(j, i):
            return 0 <= j < ny and 0 <= i < nx and bool(active[j, i])

        src, dst, dirn, rate, sink = [], [], [], [], []
        cells = np.argwhere(active)
        for d in range(grid.directions.n_d):
            rx = abs(u[d, 0]) / spec.dx
            ry = abs(u[d, 1]) / spec.dy
            rx = 0.0 if rx < 1e-12 else rx
            ry = 0.0 if ry < 1e-12 else ry
            sx = 1 if u[d, 0] > 0 else -1
            sy = 1 if u[d, 1] > 0 else -1
            wd = min(rx, ry)
            parts = [(sy, sx, wd), (0, sx, rx - wd), (sy, 0, ry - wd)]
            for oy, ox, w in parts:
                if w <= 1e-12 * max(rx, ry):
                    continue
                for j, i in cells:
                    tj, ti = j + oy, i + ox
                    if periodic:
                        tj, ti = tj % ny, ti % nx
                    if is_open(tj, ti):
                        if oy and ox and not periodic and not (
                            is_open(j, i + ox) or is_open(j + oy, i)
                        ):
                            continue
                        flag = False
                    elif (int(j), int(i), oy, ox) in sinks:
                        flag = True
                    else:
                        continue
                    src.append(pidx(j, i))
                    dst.append(pidx(tj, ti))
                    dirn.append(d)
                    rate.append(w)
                    sink.append(flag)
        jj, ii = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
        return cls(
            ny=ny,
            nx=nx,
            src=np.array(src, dtype=np.int_),
            dst=np.array(dst, dtype=np.int_),
            dirn=np.array(dirn, dtype=np.int_),
            rate=np.array(rate, dtype=float),
            is_sink=np.array(sink, dtype=bool),
            interior=((jj + 1) * pw + (ii + 1)).ravel(),
        )

    def _pad(self, f, rho):
        nd = f.shape[0]
        fp = np.zeros((nd, self.padded_size))
        fp[:, self.interior] = f.reshape(nd, -1)
        rp = np.zeros(self.padded_size)
        rp[self.interior] = rho.ravel()
        return fp, rp

    def apply(self, f, rho, dt):
        """Transported field and the mass discharged through the exit."""
        fp, rp = self._pad(f, rho)
        fp_new, outflow = kernels.link_transport(
            fp, rp, self.src, self.dst, self.dirn, self.rate, self.is_sink, dt
        )
        return fp_new[:, self.interior].reshape(f.shape), outflow

    def divergence(self, f, rho):
        """Unlimited flux balance: ``f - dt * div`` is the transported field.

        The receiver capacity limiter only scales inflow into cells that would
        overfill; it is not part of this linear flux balance.
        """
        from .kinetics import SPEED

        fp, rp = self._pad(f, rho)
        nd, P = fp.shape
        flux = self.rate * SPEED.unchecked(rp[self.dst]) * fp[self.dirn, self.src]
        out = np.bincount(self.dirn * P + self.src, weights=flux, minlength=nd * P)
        inner = ~self.is_sink
        inc = np.bincount(self.dirn[inner] * P + self.dst[inner], weights=flux[inner],
                          minlength=nd * P)
        div = (out - inc).reshape(nd, P)
        return div[:, self.interior].reshape(f.shape)


_TRANSPORT_CACHE: "weakref.WeakKeyDictionary[GeometryGrid, LinkTransport]" = (
    weakref.WeakKeyDictionary()
)


def transport_operator(grid: GeometryGrid) -> LinkTransport:
    op = _TRANSPORT_CACHE.get(grid)
    if op is None:
        op = LinkTransport.from_grid(grid)
        _TRANSPORT_CACHE[grid] = op
    return op


def transport_divergence(f, rho, grid: GeometryGrid):
    """Upwind approximation of div(v(rho) u_i f^i) per direction."""
    f = np.asarray(f, dtype=float)
    _check_field(f, grid)
    return transport_operator(grid).divergence(f, np.asarray(rho, dtype=float))


# ---------------------------------------------------------------------------
# stepping


@dataclass
class StepContext:
    """Everything about one step that does not depend on the stress level."""

    f: np.ndarray
    rho: np.ndarray
    g_part: np.ndarray  # (n_cells, n_d)
    F: np.ndarray  # (n_cells, n_d), pre-transport values on active cells
    C: np.ndarray  # (n_cells, n_d) congestion indices
    rho_cells: np.ndarray
    outflow: float
    step: int | None = None


class ForwardModel:
    """Explicit solver bound to one grid and time step.

    ``dt`` above the CFL bound is refused unless ``cfl_override`` is set, in
    which case a warning is issued and transport is sub-cycled in equal
    steps that respect the bound. ``clamp`` replaces the stability error by
    a projection onto admissible states.
    """

    def __init__(self, grid: GeometryGrid, dt: float, *, cfl_override: bool = False,
                 clamp: bool = False, threads: int = 1, transport: LinkTransport | None = None):
        if not dt > 0:
            raise ConfigurationError("time step must be positive")
        self.grid = grid
        self.dt = float(dt)
        self.clamp = clamp
        self.threads = max(1, int(threads))
        dt_max = cfl_check(grid)
        self.substeps = 1
        if self.dt > dt_max * (1 + 1e-12):
            if not cfl_override:
                raise ConfigurationError(
                    f"dt={self.dt:.6g} exceeds the CFL bound {dt_max:.6g}; "
                    "pass cfl_override to sub-cycle transport"
                )
            self.substeps = math.ceil(self.dt / dt_max - 1e-12)
            warnings.warn(
                f"dt={self.dt:.6g} exceeds the CFL bound {dt_max:.6g}; transport is "
                f"sub-cycled in {self.substeps} steps",
                stacklevel=2,
            )
        self.transport = transport or transport_operator(grid)
        self.active = grid.active
        self.cells = np.flatnonzero(self.active)
        self.A = np.ascontiguousarray(table_A_field(grid.theta_G[:, self.active], grid.directions))
        spec = grid.spec
        self.heads_per_mass = spec.heads_per_unit_density() * spec.cell_area

    @property
    def n_cells(self) -> int:
        return self.cells.size

    def cell_values(self, field):
        """Restrict a (ny, nx) field, or broadcast a scalar, to active cells."""
        if np.ndim(field) == 0:
            return np.full(self.n_cells, float(field))
        field = np.asarray(field, dtype=float)
        if field.shape == (self.n_cells,):
            return field
        if field.shape != self.grid.spec.shape:
            raise GridMismatchError(f"field shape {field.shape} != grid {self.grid.spec.shape}")
        return field.ravel()[self.cells]

    def scatter(self, values, fill=0.0):
        out = np.full(self.grid.spec.ny * self.grid.spec.nx, fill, dtype=float)
        out[self.cells] = values
        return out.reshape(self.grid.spec.shape)

    def prepare(self, f, step: int | None = None) -> StepContext:
        f = np.asarray(f, dtype=float)
        _check_field(f, self.grid)
        rho = f.sum(axis=0)
        ft, outflow = f, 0.0
        sub_dt = self.dt / self.substeps
        rho_t = rho
        for _ in range(self.substeps):
            ft, out = self.transport.apply(ft, rho_t, sub_dt)
            outflow += out
            rho_t = ft.sum(axis=0)
        nd = f.shape[0]
        F = np.ascontiguousarray(f.reshape(nd, -1)[:, self.cells].T)
        rc = rho.ravel()[self.cells]
        AF = np.einsum("nih,nh->ni", self.A, F)
        g = ft.reshape(nd, -1)[:, self.cells].T + self.dt * (
            (1.0 - rc)[:, None] * (AF - F) - (rc * rc)[:, None] * F
        )
        C = congestion_field(rho, self.grid).reshape(nd, -1)[:, self.cells].T
        return StepContext(f=f, rho=rho, g_part=g, F=F, C=np.ascontiguousarray(C),
                           rho_cells=rc, outflow=outflow, step=step)

    def complete(self, ctx: StepContext, eps, want_db: bool = False):
        """Finish a prepared step at stress level ``eps``.

        Returns ``(f_new, db)``; ``db`` holds ``F^T dB^i/dE F`` per active cell
        when requested, else None.
        """
        eps_c = self.cell_values(eps)
        if np.any(eps_c < 0.0) or np.any(eps_c > 1.0) or np.any(np.isnan(eps_c)):
            raise ConfigurationError("stress level outside [0, 1]")
        b, db = kernels.interaction_rates(ctx.F, ctx.C, eps_c, self.grid.directions,
                                          want_db, self.threads)
        new = ctx.g_part + self.dt * ctx.rho_cells[:, None] * b
        new = self._admissible(new, ctx.step)
        nd = new.shape[1]
        f_new = np.zeros((nd, self.grid.spec.ny * self.grid.spec.nx))
        f_new[:, self.cells] = new.T
        return f_new.reshape((nd,) + self.grid.spec.shape), db

    def _admissible(self, new, step):
        if self.clamp:
            new = np.maximum(new, 0.0)
            r = new.sum(axis=1)
            over = r > 1.0
            new[over] /= r[over, None]
            return new
        lo = new.min() if new.size else 0.0
        if lo < -TOL_RHO:
            c, d = np.unravel_index(np.argmin(new), new.shape)
            raise StabilityError("negative distribution value", step=step,
                                 cell=self._cell_index(c), direction=int(d), value=float(lo))
        r = new.sum(axis=1)
        if r.size and r.max() > 1.0 + TOL_RHO:
            c = int(np.argmax(r))
            raise StabilityError("density above 1", step=step, cell=self._cell_index(c),
                                 value=float(r[c]))
        return new

    def _cell_index(self, c):
        j, i = np.unravel_index(self.cells[c], self.grid.spec.shape)
        return (int(j), int(i))

    def step(self, f, eps, step: int | None = None):
        """Advance one step; returns ``(f_new, discharged_mass)``."""
        ctx = self.prepare(f, step)
        f_new, _ = self.complete(ctx, eps)
        return f_new, ctx.outflow

    def heads(self, f_or_rho) -> float:
        """Head count represented by a distribution or density field."""
        a = np.asarray(f_or_rho, dtype=float)
        rho = a.sum(axis=0) if a.ndim == 3 else a
        return float(rho.sum() * self.heads_per_mass)


def _check_field(f, grid):
    if f.ndim != 3 or f.shape[1:] != grid.spec.shape or f.shape[0] != grid.directions.n_d:
        raise GridMismatchError(
            f"distribution shape {f.shape} does not match grid "
            f"({grid.directions.n_d}, {grid.spec.ny}, {grid.spec.nx})"
        )


def forward_step(f_n, eps, grid: GeometryGrid, dt: float, *, cfl_override: bool = False,
                 clamp: bool = False):
    """Advance one explicit step with stress level ``eps`` (scalar or field)."""
    model = ForwardModel(grid, dt, cfl_override=cfl_override, clamp=clamp)
    return model.step(f_n, eps)[0]


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class ForwardTrajectory:
    """Density snapshots every ``stride`` steps plus per-step head counts.

    Times are dimensionless; ``reference_time_s`` converts them to seconds.
    """

    times: np.ndarray
    densities: list
    final_state: np.ndarray
    step_times: np.ndarray
    occupancy: np.ndarray
    exited: np.ndarray
    reference_time_s: float

    def exit_time(self, n_heads: float) -> float:
        """Seconds until ``n_heads`` have left, linearly interpolated; inf if never."""
        e = self.exited
        hit = np.nonzero(e >= n_heads)[0]
        if hit.size == 0:
            return math.inf
        k = int(hit[0])
        if k == 0:
            return 0.0
        t0, t1 = self.step_times[k - 1], self.step_times[k]
        frac = (n_heads - e[k - 1]) / (e[k] - e[k - 1])
        return float((t0 + frac * (t1 - t0)) * self.reference_time_s)


def _eps_for_step(eps_schedule, n):
    if callable(eps_schedule):
        return eps_schedule(n)
    if isinstance(eps_schedule, (list, tuple)):
        return eps_schedule[n]
    return eps_schedule


def run_forward(f0, eps_schedule, grid: GeometryGrid, time: TimeGrid, *,
                cfl_override: bool = False, clamp: bool = False, threads: int = 1,
                model: ForwardModel | None = None) -> ForwardTrajectory:
    """Apply ``time.n_steps`` explicit steps.

    ``eps_schedule`` is a scalar, a field, a sequence indexed by step, or a
    callable ``n -> eps`` giving the stress level used for step ``n -> n+1``.
    """
    model = model or ForwardModel(grid, time.dt, cfl_override=cfl_override, clamp=clamp,
                                  threads=threads)
    f = np.array(f0, dtype=float)
    _check_field(f, grid)
    occ = [model.heads(f)]
    exited = [0.0]
    times = [0.0]
    dens = [f.sum(axis=0)]
    for n in range(time.n_steps):
        try:
            f, out = model.step(f, _eps_for_step(eps_schedule, n), step=n + 1)
        except StabilityError as exc:
            if exc.step is None:
                exc.step = n + 1
            raise
        occ.append(model.heads(f))
        exited.append(exited[-1] + out * model.heads_per_mass)
        if (n + 1) % time.stride == 0:
            times.append((n + 1) * time.dt)
            dens.append(f.sum(axis=0))
    return ForwardTrajectory(
        times=np.array(times),
        densities=dens,
        final_state=f.copy(),
        step_times=time.times(),
        occupancy=np.array(occ),
        exited=np.array(exited),
        reference_time_s=grid.spec.reference_time_s,
    )
