"""Pure numpy implementations of the two hot kernels.

These are the reference versions; the compiled module mirrors them and is
checked against them in the test suite.
"""

from __future__ import annotations

import numpy as np

from .directions import DirectionSet
from .kinetics import SPEED, blend_angle_and_rate, tent_with_derivative

NAME = "python"


def interaction_rates(F, C, eps, directions: DirectionSet, want_db: bool = True, threads: int = 1):
    """Fused quadratic gains and their stress derivatives over a list of cells.

    F: (n, n_d) distribution values; C: (n, n_d) congestion indices C(h);
    eps: (n,) stress levels. Returns ``b`` and ``db`` of shape (n, n_d) with
    ``b[c, i] = sum_hk B^i_hk f^h f^k`` and ``db`` the same with dB/dE.
    """
    del threads
    u = directions.unit_vectors
    n, nd = F.shape
    uk = u[None, None, :, :]
    uc = u[C][:, :, None, :]
    theta, rate = blend_angle_and_rate(np.broadcast_to(eps[:, None, None], (n, nd, nd)), uk, uc)
    B, dB = tent_with_derivative(theta, rate, directions)  # (n, h, k, i)
    ff = F[:, :, None] * F[:, None, :]
    b = np.einsum("nhki,nhk->ni", B, ff)
    db = np.einsum("nhki,nhk->ni", dB, ff) if want_db else None
    return b, db


def link_transport(f, rho, src, dst, dirn, rate, is_sink, dt):
    """One donor-cell transport step along precomputed lattice links.

    ``f`` is (n_d, P) over the flattened padded grid and ``rho`` its density.
    Each link moves ``dt * rate * v(rho[dst]) * f[dirn, src]`` from ``src``
    to ``dst``; inflow into a cell is scaled down so its density cannot
    exceed 1. Links flagged ``is_sink`` discharge out of the domain and
    their total is returned as the outflow.
    """
    nd, P = f.shape
    flux = dt * rate * SPEED.unchecked(rho[dst]) * f[dirn, src]
    inner = ~is_sink
    inflow = np.bincount(dst[inner], weights=flux[inner], minlength=P)
    room = np.maximum(0.0, 1.0 - rho)
    scale = np.ones(P)
    busy = inflow > room
    scale[busy] = room[busy] / inflow[busy]
    flux = np.where(inner, flux * scale[dst], flux)
    out = np.bincount(dirn * P + src, weights=flux, minlength=nd * P).reshape(nd, P)
    inc = np.bincount(dirn[inner] * P + dst[inner], weights=flux[inner],
                      minlength=nd * P).reshape(nd, P)
    f_new = f - out + inc
    return f_new, float(flux[is_sink].sum())
