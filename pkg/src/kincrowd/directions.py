"""Discrete walking directions and the angular metric on them."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np

TWO_PI = 2.0 * np.pi
DEFAULT_N_DIRECTIONS = 8


@dataclass(frozen=True)
class DirectionSet:
    """Equally spaced directions ``theta_i = i * 2*pi / n_d`` (0-based ``i``).

    The transition tables use a tent of half-width pi/4, which only yields
    row-stochastic tables when the spacing is exactly pi/4, i.e. ``n_d = 8``.
    Other counts are accepted but warned about; row-sum checks are then off.
    """

    n_d: int = DEFAULT_N_DIRECTIONS

    def __post_init__(self):
        if self.n_d < 3:
            raise ValueError(f"need at least 3 directions, got {self.n_d}")
        if self.n_d != DEFAULT_N_DIRECTIONS:
            warnings.warn(
                f"n_d={self.n_d}: transition tables are not row-stochastic unless "
                "n_d == 8; row-sum assertions are disabled",
                stacklevel=2,
            )

    @property
    def stochastic(self) -> bool:
        return self.n_d == DEFAULT_N_DIRECTIONS

    @cached_property
    def spacing(self) -> float:
        return TWO_PI / self.n_d

    @cached_property
    def angles(self) -> np.ndarray:
        return np.arange(self.n_d) * self.spacing

    @cached_property
    def unit_vectors(self) -> np.ndarray:
        """Array of shape (n_d, 2); axis-aligned components are exact zeros."""
        u = np.stack([np.cos(self.angles), np.sin(self.angles)], axis=1)
        u[np.abs(u) < 1e-15] = 0.0
        return u

    def wrap(self, index):
        return np.mod(index, self.n_d)


def angular_distance(p, q):
    """Distance on the circle between two angles; result in [0, pi]."""
    d = np.mod(np.abs(np.asarray(p, dtype=float) - np.asarray(q, dtype=float)), TWO_PI)
    return np.where(d <= np.pi, d, TWO_PI - d)


def wrap_angle(theta):
    """Map angles into [0, 2*pi)."""
    t = np.mod(theta, TWO_PI)
    # np.mod can return exactly 2*pi for tiny negative inputs
    return np.where(t >= TWO_PI, 0.0, t)
