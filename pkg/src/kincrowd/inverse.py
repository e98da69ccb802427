"""Per-step estimation of the stress field by projected gradient iterations.

At every time step the state is advanced with a trial stress field, the
mismatch with the observed density frame gives the adjoint, and the stress
field is moved along the bracket

    G = xi (E - E_ref) dx dy - rho^n * sum_i db_i Lambda_i

until the cell-averaged L2 norm of ``G`` drops below ``tol``. ``db_i`` is
``F^T (dB^i/dE) F`` at the pre-step state and ``Lambda_i`` the adjoint, which
has identical components in every direction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, GridMismatchError
from .forward import ForwardModel, StepContext, TimeGrid
from .geometry import GeometryGrid

UPDATE_SIGNS = {"fixed-point": 1.0, "descent": -1.0}


@dataclass
class ObservationSeries:
    """Density frames observed at ``times`` (dimensionless), one every ``stride`` steps."""

    times: np.ndarray
    frames: list
    stride: int = 1
    dt: float | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if len(self.frames) != self.times.size:
            raise ConfigurationError("one frame per observation time is required")
        if np.any(np.diff(self.times) <= 0):
            raise ConfigurationError("observation times must be strictly increasing")
        if self.stride < 1:
            raise ConfigurationError("observation stride must be at least 1")
        if self.frames:
            shape = np.shape(self.frames[0])
            for k, fr in enumerate(self.frames):
                if np.shape(fr) != shape:
                    raise GridMismatchError(f"frame {k} has shape {np.shape(fr)}, expected {shape}")

    def __len__(self):
        return len(self.frames)

    def check_against(self, grid: GeometryGrid, time: TimeGrid):
        for k, fr in enumerate(self.frames):
            if np.shape(fr) != grid.spec.shape:
                raise GridMismatchError(
                    f"frame {k} (t={self.times[k]:.6g}) has shape {np.shape(fr)}, "
                    f"grid is {grid.spec.shape}"
                )
        if self.stride != time.stride:
            raise ConfigurationError(
                f"observation stride {self.stride} differs from time grid stride {time.stride}"
            )
        needed = time.n_steps // time.stride
        if len(self.frames) < needed:
            raise ConfigurationError(
                f"{len(self.frames)} frames do not cover {needed} observation times"
            )
        expected = time.dt * time.stride * np.arange(1, needed + 1)
        if needed and not np.allclose(self.times[:needed], expected, rtol=1e-9, atol=1e-12):
            raise ConfigurationError("observation times are not multiples of stride * dt")


@dataclass(frozen=True)
class DescentConfig:
    """Settings of the per-step descent.

    ``update_sign`` selects ``E + delta*G`` ("fixed-point") or ``E - delta*G``
    ("descent"); only the latter decreases the regularised functional.
    """

    delta: float = 50.0
    xi: float = 0.0
    eps_ref: float | np.ndarray = 0.75
    tol: float = 1e-5
    max_iters: int = 200
    eps0: float | np.ndarray = 0.05
    update_sign: str = "descent"
    clamp: bool = True

    def __post_init__(self):
        if not self.delta > 0:
            raise ConfigurationError("delta must be positive")
        if self.xi < 0:
            raise ConfigurationError("xi must be nonnegative")
        if not self.tol > 0:
            raise ConfigurationError("tol must be positive")
        if self.max_iters < 1:
            raise ConfigurationError("max_iters must be at least 1")
        if self.update_sign not in UPDATE_SIGNS:
            raise ConfigurationError(f"update_sign must be one of {sorted(UPDATE_SIGNS)}")
        for name in ("eps_ref", "eps0"):
            v = np.asarray(getattr(self, name), dtype=float)
            if np.any(v[~np.isnan(v)] < 0) or np.any(v[~np.isnan(v)] > 1):
                raise ConfigurationError(f"{name} must lie in [0, 1]")

    @property
    def sign(self) -> float:
        return UPDATE_SIGNS[self.update_sign]


@dataclass
class StepOutcome:
    f_next: np.ndarray
    rho_next: np.ndarray
    eps_next: np.ndarray  # values on active cells
    iterations: int
    residual: float
    converged: bool


@dataclass
class EstimationResult:
    """Histories of one estimation run; index ``n`` refers to time ``(n+1) dt``."""

    times: np.ndarray
    eps_history: list = field(default_factory=list)
    rho_history: list = field(default_factory=list)
    observed: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    mismatch_series: np.ndarray = field(default_factory=lambda: np.zeros(0))
    regularization_series: np.ndarray = field(default_factory=lambda: np.zeros(0))
    iterations_per_step: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    residual_per_step: np.ndarray = field(default_factory=lambda: np.zeros(0))
    converged: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    occupancy: np.ndarray = field(default_factory=lambda: np.zeros(0))
    final_state: np.ndarray | None = None
    reference_time_s: float = 1.0

    @property
    def functional_series(self) -> np.ndarray:
        """Regularised functional J + R at each step (nan where no frame)."""
        return self.mismatch_series + self.regularization_series


# ---------------------------------------------------------------------------
# building blocks


def _match(a, b):
    if np.shape(a) != np.shape(b):
        raise GridMismatchError(f"shapes differ: {np.shape(a)} vs {np.shape(b)}")


def _cell_area(grid_or_area):
    if isinstance(grid_or_area, GeometryGrid):
        return grid_or_area.spec.cell_area, grid_or_area.active
    return float(grid_or_area), None


def mismatch_functional(rho, rho_v, grid) -> float:
    """Half the squared L2 distance between densities over walkable cells."""
    rho = np.asarray(rho, dtype=float)
    rho_v = np.asarray(rho_v, dtype=float)
    _match(rho, rho_v)
    area, mask = _cell_area(grid)
    diff = rho - rho_v
    if mask is not None:
        _match(rho, mask)
        diff = diff[mask]
    return 0.5 * float(np.sum(diff * diff)) * area


def regularization_term(eps, eps_ref, xi: float, grid) -> float:
    """Tikhonov penalty ``xi/2 * ||eps - eps_ref||^2`` over walkable cells."""
    if xi < 0:
        raise ConfigurationError("xi must be nonnegative")
    if xi == 0:
        return 0.0
    eps = np.asarray(eps, dtype=float)
    area, mask = _cell_area(grid)
    diff = eps - np.broadcast_to(np.asarray(eps_ref, dtype=float), eps.shape)
    if mask is not None:
        diff = diff[mask]
    return 0.5 * xi * float(np.sum(diff * diff)) * area


def adjoint_solve(rho_k1, rho_v, dt: float, grid, n_d: int | None = None):
    """Adjoint per direction: ``-dt (rho - rho_v) dx dy``, identical for all directions.

    With a grid, returns (n_d, ny, nx) and zeros off the walkable cells. With
    a bare cell area, ``rho_k1`` may be any array and ``n_d`` is required.
    """
    rho_k1 = np.asarray(rho_k1, dtype=float)
    rho_v = np.asarray(rho_v, dtype=float)
    _match(rho_k1, rho_v)
    area, mask = _cell_area(grid)
    lam = -dt * (rho_k1 - rho_v) * area
    if mask is not None:
        lam = np.where(mask, lam, 0.0)
        n_d = grid.directions.n_d
    if n_d is None:
        raise ConfigurationError("n_d is required without a grid")
    return np.broadcast_to(lam, (n_d,) + lam.shape).copy()


def stress_gradient(eps_k, lam, rho_n, db, cfg: DescentConfig, cell_area: float):
    """Per-cell bracket driving the update; direction axis first in ``lam`` and ``db``."""
    eps_k = np.asarray(eps_k, dtype=float)
    ref = np.broadcast_to(np.asarray(cfg.eps_ref, dtype=float), eps_k.shape)
    data = np.asarray(rho_n) * np.sum(np.asarray(db) * np.asarray(lam), axis=0)
    return cfg.xi * (eps_k - ref) * cell_area - data


def stress_update(eps_k, lam, rho_n, db, cfg: DescentConfig, cell_area: float):
    """One projected step ``clip(E + sign * delta * G, 0, 1)``."""
    g = stress_gradient(eps_k, lam, rho_n, db, cfg, cell_area)
    new = np.asarray(eps_k, dtype=float) + cfg.sign * cfg.delta * g
    return np.clip(new, 0.0, 1.0) if cfg.clamp else new


def optimality_residual(eps_k, lam, rho_n, db, cfg: DescentConfig, cell_area: float,
                        domain_area: float) -> float:
    """``(1/|Omega|) * sqrt(sum G^2 dx dy)`` for the bracket G."""
    g = stress_gradient(eps_k, lam, rho_n, db, cfg, cell_area)
    return math.sqrt(float(np.sum(g * g)) * cell_area) / domain_area


# ---------------------------------------------------------------------------
# loops


def descent_step_loop(model: ForwardModel, ctx: StepContext, eps_init, rho_v_next,
                      cfg: DescentConfig) -> StepOutcome:
    """Steepest-descent iterations for one time step.

    Each iteration solves the state at the current stress field, forms the
    adjoint against ``rho_v_next`` and tests the residual; if it is below
    ``tol`` the state and the stress field that produced it are committed,
    otherwise the stress field is updated. After ``max_iters`` updates a
    final state solve is made with the last stress field and the step is
    flagged as not converged.
    """
    grid = model.grid
    area = grid.spec.cell_area
    omega = grid.area
    nd = grid.directions.n_d
    rho_v = model.cell_values(rho_v_next)
    ref = model.cell_values(cfg.eps_ref) if np.ndim(cfg.eps_ref) else cfg.eps_ref
    local = DescentConfig(cfg.delta, cfg.xi, ref, cfg.tol, cfg.max_iters, 0.0,
                          cfg.update_sign, cfg.clamp)
    eps = np.array(model.cell_values(eps_init), dtype=float)
    iters = 0
    while True:
        f_next, db = model.complete(ctx, eps, want_db=True)
        rho_next = f_next.sum(axis=0)
        lam = adjoint_solve(rho_next.ravel()[model.cells], rho_v, model.dt, area, n_d=nd)
        dbT = db.T
        res = optimality_residual(eps, lam, ctx.rho_cells, dbT, local, area, omega)
        if res < cfg.tol:
            return StepOutcome(f_next, rho_next, eps, iters, res, True)
        if iters == cfg.max_iters:
            return StepOutcome(f_next, rho_next, eps, iters, res, False)
        eps = stress_update(eps, lam, ctx.rho_cells, dbT, local, area)
        iters += 1


def estimate(f0, observations: ObservationSeries, grid: GeometryGrid, time: TimeGrid,
             cfg: DescentConfig, *, cfl_override: bool = False, clamp: bool = False,
             threads: int = 1, model: ForwardModel | None = None,
             progress=None) -> EstimationResult:
    """Run the per-step estimation over the whole horizon.

    The stress field of step ``n+1`` starts from the committed field of step
    ``n`` (``cfg.eps0`` at the first step). Steps without an observation
    frame reuse the last committed field without iterating.
    """
    observations.check_against(grid, time)
    model = model or ForwardModel(grid, time.dt, cfl_override=cfl_override, clamp=clamp,
                                  threads=threads)
    f = np.array(f0, dtype=float)
    eps = np.array(model.cell_values(cfg.eps0), dtype=float)
    N = time.n_steps
    res = EstimationResult(
        times=time.dt * np.arange(1, N + 1),
        observed=np.zeros(N, dtype=bool),
        mismatch_series=np.full(N, np.nan),
        regularization_series=np.full(N, np.nan),
        iterations_per_step=np.zeros(N, dtype=int),
        residual_per_step=np.full(N, np.nan),
        converged=np.ones(N, dtype=bool),
        occupancy=np.zeros(N + 1),
        reference_time_s=grid.spec.reference_time_s,
    )
    res.occupancy[0] = model.heads(f)
    for n in range(N):
        ctx = model.prepare(f, step=n + 1)
        if (n + 1) % time.stride == 0:
            frame = np.asarray(observations.frames[(n + 1) // time.stride - 1], dtype=float)
            out = descent_step_loop(model, ctx, eps, frame, cfg)
            f, eps = out.f_next, out.eps_next
            eps_field = model.scatter(eps, fill=np.nan)
            res.observed[n] = True
            res.mismatch_series[n] = mismatch_functional(out.rho_next, frame, grid)
            res.regularization_series[n] = regularization_term(eps_field, cfg.eps_ref, cfg.xi,
                                                               grid)
            res.iterations_per_step[n] = out.iterations
            res.residual_per_step[n] = out.residual
            res.converged[n] = out.converged
        else:
            f, _ = model.complete(ctx, eps)
            eps_field = model.scatter(eps, fill=np.nan)
        res.eps_history.append(eps_field)
        res.rho_history.append(f.sum(axis=0))
        res.occupancy[n + 1] = model.heads(f)
        if progress is not None:
            progress(n + 1, N)
    res.final_state = f
    return res
