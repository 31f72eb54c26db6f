"""Polytopic disturbance sets and the horizon down-sampling map.

The controller hedges against future head-vehicle velocity errors drawn from
a box built out of the recent disturbance history. Two estimators are
provided: constant bounds (recent spread around the current value) and
time-varying bounds (constant-acceleration extrapolation with the spread of
recent finite differences). A linear-interpolation map lets the box live on
a few anchor steps instead of the full horizon, which keeps vertex counts
manageable.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

VERTEX_CAP = 4096


@dataclass(frozen=True)
class DisturbancePolytope:
    """Axis-aligned box of disturbance trajectories.

    When built through apply_downsampling, `interp` holds the N x dim
    interpolation matrix mapping anchor values back to a full-horizon
    trajectory and `ts` the anchor stride.
    """

    lower: np.ndarray
    upper: np.ndarray
    ts: int | None = None
    interp: np.ndarray | None = None

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        up = np.atleast_1d(np.asarray(self.upper, dtype=float))
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", up)
        if lo.shape != up.shape or lo.ndim != 1:
            raise ValueError("bounds must be 1-D vectors of equal length")
        if np.any(lo > up):
            raise ValueError("lower bound exceeds upper bound")
        if self.interp is not None:
            e = np.asarray(self.interp, dtype=float)
            object.__setattr__(self, "interp", e)
            if e.shape[1] != lo.shape[0]:
                raise ValueError("interpolation width must match bound length")

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def inequality_form(self):
        """(A, b) with the box written as A w <= b, A = [I; -I]."""
        eye = np.eye(self.dim)
        return np.vstack([eye, -eye]), np.concatenate([self.upper, -self.lower])

    def contains(self, points, tol: float = 1e-9):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.all((pts >= self.lower - tol) & (pts <= self.upper + tol), axis=1)

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        width = self.upper - self.lower
        return self.lower + width * rng.random((count, self.dim))

    def vertex_count(self) -> int:
        return int(np.prod(np.where(self.lower == self.upper, 1, 2)))

    def expand(self, anchor_values: np.ndarray) -> np.ndarray:
        """Map anchor values to the full horizon (identity without interp)."""
        if self.interp is None:
            return np.asarray(anchor_values, dtype=float)
        return self.interp @ np.asarray(anchor_values, dtype=float)


def estimate_constant_bounds(e_ini, horizon: int) -> DisturbancePolytope:
    """Box with every step bounded by the current disturbance value shifted
    by the recent window's spread around its mean."""
    e = np.asarray(e_ini, dtype=float).ravel()
    if e.size == 0:
        raise ValueError("empty disturbance history")
    if horizon < 1:
        raise ValueError("horizon must be positive")
    mean = float(e.mean())
    low = float(e.min()) - mean
    up = float(e.max()) - mean
    cur = float(e[-1])
    return DisturbancePolytope(np.full(horizon, cur + low),
                               np.full(horizon, cur + up))


def estimate_timevarying_bounds(e_ini, horizon: int, dt: float) -> DisturbancePolytope:
    """Box that extrapolates the current value with the last finite-difference
    rate, widened per step by the spread of recent rates around their mean."""
    e = np.asarray(e_ini, dtype=float).ravel()
    if e.size < 3:
        raise ValueError("need at least 3 samples for rate statistics")
    if horizon < 1:
        raise ValueError("horizon must be positive")
    if dt <= 0:
        raise ValueError("dt must be positive")
    rates = np.diff(e) / dt
    mean = float(rates.mean())
    rate_low = float(rates.min()) - mean
    rate_up = float(rates.max()) - mean
    rate_cur = float(rates[-1])
    cur = float(e[-1])
    k = np.arange(1, horizon + 1) * dt
    return DisturbancePolytope(cur + (rate_cur + rate_low) * k,
                               cur + (rate_cur + rate_up) * k)


def downsample_map(horizon: int, ts: int):
    """Linear-interpolation matrix from anchor values to the full horizon.

    Anchors sit at steps 1, 1+ts, 1+2*ts, ... plus the final step; between
    the last regular anchor and the final step the interpolation stretches
    to cover the remainder. Returns (anchor count, horizon x count matrix).
    """
    if horizon < 2:
        raise ValueError("horizon must be at least 2")
    if not 1 <= ts <= horizon:
        raise ValueError("stride must lie in [1, horizon]")
    tail = (horizon - 2) // ts
    n_anchor = tail + 2
    interp = np.zeros((horizon, n_anchor))
    for k in range(1, horizon + 1):
        if k <= tail * ts:
            base = (k - 1) // ts
            w = ((k - 1) % ts) / ts
        else:
            base = tail
            w = (k - tail * ts - 1) / (horizon - tail * ts - 1)
        interp[k - 1, base] = 1.0 - w
        interp[k - 1, base + 1] += w
    return n_anchor, interp


def anchor_steps(horizon: int, ts: int) -> np.ndarray:
    """Zero-based step indices whose values the anchors reproduce exactly."""
    tail = (horizon - 2) // ts
    return np.concatenate([np.arange(tail + 1) * ts, [horizon - 1]])


def apply_downsampling(poly: DisturbancePolytope, ts: int) -> DisturbancePolytope:
    """Restate the box over anchor steps only, keeping the expansion map."""
    n_anchor, interp = downsample_map(poly.dim, ts)
    idx = anchor_steps(poly.dim, ts)
    assert idx.shape[0] == n_anchor
    return DisturbancePolytope(poly.lower[idx], poly.upper[idx],
                               ts=ts, interp=interp)


def enumerate_vertices(poly: DisturbancePolytope, cap: int = VERTEX_CAP) -> np.ndarray:
    """All corner points of the box, degenerate axes collapsed.

    Returns an array of shape (count, dim) in deterministic binary-counting
    order over the non-degenerate axes.
    """
    count = poly.vertex_count()
    if count > cap:
        raise ValueError(
            f"{count} vertices exceed the cap of {cap}; "
            "down-sample the disturbance set (larger stride) first")
    free = np.nonzero(poly.lower != poly.upper)[0]
    verts = np.tile(poly.lower, (count, 1))
    for j, axis in enumerate(free):
        period = 1 << (len(free) - 1 - j)
        pick = (np.arange(count) // period) % 2 == 1
        verts[pick, axis] = poly.upper[axis]
    return verts
