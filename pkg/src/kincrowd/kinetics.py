"""Speed law, transition tables and the interaction operator.

Conventions: a distribution field ``f`` has shape ``(n_d, ny, nx)``. The
geometric table is stored as ``A[i, h]`` (probability of switching from
``h`` to ``i``) and the interaction tables as ``B[i, h, k]`` (switching from
``h`` to ``i`` after meeting a field individual heading along ``k``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .directions import DirectionSet, angular_distance, wrap_angle
from .errors import DomainError, GridMismatchError

TOL_RHO = 1e-10
NORM_FLOOR = 1e-9
FOUR_OVER_PI = 4.0 / np.pi
SNAP = 1e-12


@dataclass(frozen=True)
class SpeedLaw:
    """Unit speed up to ``rho_c``, then a Hermite cubic down to 0 at rho = 1."""

    rho_c: float = 0.2

    def __call__(self, rho):
        rho = np.asarray(rho, dtype=float)
        if np.any(rho < -TOL_RHO) or np.any(rho > 1.0 + TOL_RHO) or np.any(np.isnan(rho)):
            raise DomainError("density outside [0, 1] passed to the speed law")
        return self.unchecked(rho)

    def unchecked(self, rho):
        s = np.clip((np.asarray(rho, dtype=float) - self.rho_c) / (1.0 - self.rho_c), 0.0, 1.0)
        return 1.0 - s * s * (3.0 - 2.0 * s)


SPEED = SpeedLaw()


def speed(rho):
    """Dimensionless walking speed v(rho); raises DomainError outside [0, 1]."""
    v = SPEED(rho)
    return float(v) if v.ndim == 0 else v


def density_of(f):
    """Sum a distribution field over its direction axis."""
    return np.asarray(f, dtype=float).sum(axis=0)


def tent(theta, directions: DirectionSet):
    """Tent weights ``max(0, 1 - d(theta, theta_i) * 4/pi)`` for every ``i``.

    ``theta`` may carry leading axes; the direction axis is appended last.
    """
    d = angular_distance(np.asarray(theta, dtype=float)[..., None], directions.angles)
    return np.maximum(0.0, 1.0 - FOUR_OVER_PI * d)


def table_A_field(theta_G, directions: DirectionSet):
    """Geometric tables for every cell: ``theta_G`` (n_d, ...) -> A (..., i, h)."""
    w = tent(theta_G, directions)  # (h, ..., i)
    return np.moveaxis(w, 0, -1)


def table_A(grid, cell):
    """Geometric table ``A[i, h]`` at one walkable cell."""
    j, i = cell
    return table_A_field(grid.theta_G[:, j, i], grid.directions)


# ---------------------------------------------------------------------------
# congestion direction


def directional_derivatives(rho, grid):
    """One-sided finite differences of ``rho`` along every direction.

    Returns an array (n_d, ny, nx). The difference is taken over the length
    ``min(dx, dy)`` with ``rho`` bilinearly interpolated at the offset point.
    Closed corners drop out of the interpolation (weights renormalised); if
    the cell nearest to the offset point is closed the derivative is
    ``+inf``. Seen from an exit cell, the cells just beyond the exit are open
    and empty. Entries on non-walkable cells are ``+inf``.
    """
    rho = np.asarray(rho, dtype=float)
    spec = grid.spec
    if rho.shape != spec.shape:
        raise GridMismatchError(f"density shape {rho.shape} != grid shape {spec.shape}")
    active = grid.active
    rho_p = np.pad(np.where(active, rho, 0.0), 1)
    base = np.pad(active, 1)
    d_base = _offset_differences(rho_p, base, active, grid)
    ghost = grid.open_ghost
    if not ghost.any():
        return d_base
    d_exit = _offset_differences(rho_p, base | ghost, active, grid)
    return np.where(grid.exit_mask[None], d_exit, d_base)


def _offset_differences(rho_p, pass_p, active, grid):
    spec = grid.spec
    ny, nx = spec.shape
    h_eff = min(spec.dx, spec.dy)
    u = grid.directions.unit_vectors
    out = np.full((grid.directions.n_d,) + spec.shape, np.inf)
    centre = rho_p[1:-1, 1:-1]

    def shifted(a, oy, ox):
        return a[1 + oy:1 + oy + ny, 1 + ox:1 + ox + nx]

    for j in range(grid.directions.n_d):
        ax = u[j, 0] * h_eff / spec.dx
        ay = u[j, 1] * h_eff / spec.dy
        ax = 0.0 if abs(ax) < 1e-12 else ax
        ay = 0.0 if abs(ay) < 1e-12 else ay
        sx = 1 if ax > 0 else -1
        sy = 1 if ay > 0 else -1
        fx, fy = abs(ax), abs(ay)
        corners = [
            (0, 0, (1 - fx) * (1 - fy)),
            (0, sx, fx * (1 - fy)),
            (sy, 0, (1 - fx) * fy),
            (sy, sx, fx * fy),
        ]
        num = np.zeros(spec.shape)
        wsum = np.zeros(spec.shape)
        for oy, ox, w in corners:
            if w == 0.0:
                continue
            ok = shifted(pass_p, oy, ox)
            num += np.where(ok, w * (shifted(rho_p, oy, ox) - centre), 0.0)
            wsum += np.where(ok, w, 0.0)
        nearest_ok = shifted(pass_p, sy * int(np.floor(fy + 0.5)), sx * int(np.floor(fx + 0.5)))
        with np.errstate(invalid="ignore", divide="ignore"):
            d = num / wsum / h_eff
        valid = active & nearest_ok & (wsum > 0)
        out[j] = np.where(valid, d, np.inf)
    return out


def _select_congestion(deriv, theta_G_h, h, directions: DirectionSet):
    """Apply the argmin with its tie-break rule; ``deriv`` has shape (n_d, ...)."""
    nd = directions.n_d
    cands = [h, (h - 1) % nd, (h + 1) % nd]
    vals = np.stack([deriv[c] for c in cands])
    gdist = np.stack([angular_distance(directions.angles[c], theta_G_h) for c in cands])
    best = np.zeros(vals.shape[1:], dtype=np.int64)
    # candidates are scanned in preference order: h first, then h-1, h+1
    for slot in (1, 2):
        cur_v = np.take_along_axis(vals, best[None], 0)[0]
        cur_g = np.take_along_axis(gdist, best[None], 0)[0]
        cur_i = np.asarray(cands)[best]
        v, g, idx = vals[slot], gdist[slot], cands[slot]
        better = v < cur_v
        tie = (v == cur_v) & (best != 0)
        better |= tie & ((g < cur_g) | ((g == cur_g) & (idx < cur_i)))
        best = np.where(better, slot, best)
    return np.asarray(cands)[best]


def congestion_field(rho, grid, deriv=None):
    """Congestion-avoiding direction index C(h) for every cell: (n_d, ny, nx) ints."""
    if deriv is None:
        deriv = directional_derivatives(rho, grid)
    nd = grid.directions.n_d
    out = np.empty((nd,) + grid.spec.shape, dtype=np.int64)
    for h in range(nd):
        out[h] = _select_congestion(deriv, grid.theta_G[h], h, grid.directions)
    return out


def congestion_direction(rho, grid, cell, h: int) -> int:
    """Index of the least congested direction among h-1, h, h+1 at ``cell``."""
    j, i = cell
    deriv = directional_derivatives(rho, grid)[:, j, i]
    return int(_select_congestion(deriv[:, None], np.atleast_1d(grid.theta_G[h, j, i]),
                                  h, grid.directions)[0])


# ---------------------------------------------------------------------------
# interaction tables


def interaction_direction(h: int, k: int, C: int, eps: float,
                          directions: DirectionSet | None = None):
    """Unit vector of the blend ``eps*u_k + (1-eps)*u_C``.

    ``h`` only enters through ``C`` (the congestion direction seen from
    ``h``); it is accepted to mirror the table indexing. Falls back to
    ``u_C`` when the blend degenerates.
    """
    del h
    directions = directions or DirectionSet()
    if not 0.0 <= eps <= 1.0:
        raise DomainError(f"stress level {eps} outside [0, 1]")
    u = directions.unit_vectors
    if eps == 0.0:
        return u[C].copy()
    if eps == 1.0:
        return u[k].copy()
    w = eps * u[k] + (1.0 - eps) * u[C]
    n = np.hypot(w[0], w[1])
    if n < NORM_FLOOR:
        return u[C].copy()
    return w / n


def blend_angle_and_rate(eps, uk, uc):
    """Angle of the blend and its derivative with respect to eps.

    ``uk`` and ``uc`` have trailing axis 2. The angular rate is the exact
    derivative of ``atan2`` of the blend, ``(w x w') / |w|^2`` with
    ``w' = u_k - u_C``; it is set to 0 where the blend degenerates.
    """
    eps = np.asarray(eps, dtype=float)[..., None]
    w = eps * uk + (1.0 - eps) * uc
    wp = uk - uc
    n2 = w[..., 0] ** 2 + w[..., 1] ** 2
    degenerate = n2 < NORM_FLOOR**2
    uc_b = np.broadcast_to(uc, w.shape)
    w = np.where(degenerate[..., None], uc_b, w)
    theta = wrap_angle(np.arctan2(w[..., 1], w[..., 0]))
    with np.errstate(invalid="ignore", divide="ignore"):
        rate = (w[..., 0] * wp[..., 1] - w[..., 1] * wp[..., 0]) / n2
    rate = np.where(degenerate, 0.0, rate)
    return theta, rate


def tent_with_derivative(theta, rate, directions: DirectionSet):
    """Tent weights around ``theta`` and their derivative given d(theta)/d(eps).

    Inside the cone ``B = 1 - (4/pi) |theta - theta_i|`` so
    ``dB = -(4/pi) sign(theta - theta_i) * rate``. Within ``SNAP`` of a
    lattice direction the table is that unit vector with zero slope, which
    keeps the column sums of the derivative at zero.
    """
    diff = np.asarray(theta, dtype=float)[..., None] - directions.angles
    diff = np.mod(diff + np.pi, 2 * np.pi) - np.pi
    d = np.abs(diff)
    B = 1.0 - FOUR_OVER_PI * d
    # strict support: a direction exactly on the cone edge carries neither weight nor slope
    inside = B > 0.0
    B = np.where(inside, B, 0.0)
    dB = np.where(inside, -FOUR_OVER_PI * np.sign(diff) * np.asarray(rate)[..., None], 0.0)
    # a blend on a lattice direction (up to rounding) sits on the tent's kink: unit
    # weight there and zero slope, whichever side atan2 rounded to
    snap = d < SNAP
    hit = snap.any(axis=-1, keepdims=True)
    B = np.where(hit, snap.astype(float), B)
    dB = np.where(hit, 0.0, dB)
    return B, dB


def table_B_local(C_row, eps, directions: DirectionSet):
    """Interaction tables from the congestion row ``C_row[h]`` at one cell.

    Returns ``(B, dB_dE)`` of shape (n_d, n_d, n_d) indexed ``[i, h, k]``.
    """
    u = directions.unit_vectors
    C_row = np.asarray(C_row, dtype=np.int64)
    uk = u[None, :, :]  # (1, k, 2)
    uc = u[C_row][:, None, :]  # (h, 1, 2)
    theta, rate = blend_angle_and_rate(np.full((len(C_row), directions.n_d), eps), uk, uc)
    B, dB = tent_with_derivative(theta, rate, directions)  # (h, k, i)
    return np.moveaxis(B, -1, 0), np.moveaxis(dB, -1, 0)


def table_B(grid, rho, eps, cell):
    """Interaction tables and their eps-derivative at one walkable cell."""
    j, i = cell
    eps_c = float(np.asarray(eps)[j, i]) if np.ndim(eps) else float(eps)
    if not 0.0 <= eps_c <= 1.0:
        raise DomainError(f"stress level {eps_c} outside [0, 1]")
    C = congestion_field(rho, grid)[:, j, i]
    return table_B_local(C, eps_c, grid.directions)


def b_vector(f_cell, B):
    """Quadratic interaction gains ``b_i = f^T B^i f`` at one cell."""
    f_cell = np.asarray(f_cell, dtype=float)
    return np.einsum("ihk,h,k->i", B, f_cell, f_cell)


def interaction_terms(f_cell, rho, A, b):
    """Net interaction rates at one cell.

    ``(1 - rho) (A f - f) + rho (b - rho f)``; sums to zero over directions
    whenever A and B are column-stochastic in ``i``.
    """
    f_cell = np.asarray(f_cell, dtype=float)
    return (1.0 - rho) * (A @ f_cell - f_cell) + rho * (np.asarray(b) - rho * f_cell)
