"""Trajectory data handling: Hankel matrices, excitation checks, offline
data collection, and the past/future block partition used by the predictor.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from . import traffic
from .traffic import OvmParams, SimConfig, TrafficSim, equilibrium_spacing

# Singular values below RANK_RTOL times the largest one count as zero.
RANK_RTOL = 1e-9


class CollectionDiverged(RuntimeError):
    """Raised when vehicles collide during offline data collection."""

    def __init__(self, step: int):
        super().__init__(f"offline collection diverged: spacing <= 0 at step {step}")
        self.step = step


def _as_matrix(series) -> np.ndarray:
    values = np.asarray(series, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if values.ndim != 2 or values.shape[0] == 0:
        raise ValueError("signal must be a (T,) or (T, m) array with T >= 1")
    if not np.all(np.isfinite(values)):
        raise ValueError("signal contains non-finite values")
    return values


def build_hankel(series, depth: int) -> np.ndarray:
    """Block Hankel matrix of the given depth.

    A length-T signal with m channels gives a (depth*m) x (T-depth+1) matrix
    whose column j stacks samples j .. j+depth-1.
    """
    values = _as_matrix(series)
    T, m = values.shape
    if depth < 1:
        raise ValueError("depth must be at least 1")
    if T < depth:
        raise ValueError(f"signal length {T} shorter than depth {depth}")
    q = T - depth + 1
    H = np.empty((depth * m, q))
    for i in range(depth):
        H[i * m:(i + 1) * m, :] = values[i:i + q, :].T
    return H


def is_persistently_exciting(series, order: int) -> bool:
    """True when the depth-`order` Hankel matrix of the signal has full row rank."""
    H = build_hankel(series, order)
    if H.shape[1] < H.shape[0]:
        return False
    sv = np.linalg.svd(H, compute_uv=False)
    return bool(np.sum(sv > RANK_RTOL * sv[0]) == H.shape[0])


@dataclass(frozen=True)
class Dims:
    """Bookkeeping for a partitioned dataset."""

    t_ini: int
    horizon: int
    n: int          # follower count; outputs have n+1 channels per step
    samples: int    # T
    cols: int       # Hankel column count q = T - (t_ini + horizon) + 1

    @property
    def depth(self) -> int:
        return self.t_ini + self.horizon

    @property
    def p(self) -> int:
        return self.n + 1


@dataclass
class HankelBlocks:
    """Past/future Hankel blocks of the input, disturbance, and output data."""

    up: np.ndarray
    uf: np.ndarray
    ep: np.ndarray
    ef: np.ndarray
    yp: np.ndarray
    yf: np.ndarray
    dims: Dims
    pe_ok: bool


def partition(u_data, e_data, y_data, t_ini: int, horizon: int) -> HankelBlocks:
    """Split depth-(t_ini+horizon) Hankel matrices into past/future blocks.

    Warns (without failing) when the input data misses the excitation order
    needed for exact prediction on the nominal linearized platoon model.
    """
    u = _as_matrix(u_data)
    e = _as_matrix(e_data)
    y = _as_matrix(y_data)
    if u.shape[1] != 1 or e.shape[1] != 1:
        raise ValueError("input and disturbance must be scalar signals")
    if not (u.shape[0] == e.shape[0] == y.shape[0]):
        raise ValueError("input, disturbance, and output must share the sample count")
    if t_ini < 1 or horizon < 1:
        raise ValueError("t_ini and horizon must be at least 1")
    T = u.shape[0]
    depth = t_ini + horizon
    if T - depth + 1 < 1:
        raise ValueError(f"need T >= t_ini + horizon; got T={T}, depth={depth}")

    p = y.shape[1]
    n = p - 1
    Hu = build_hankel(u, depth)
    He = build_hankel(e, depth)
    Hy = build_hankel(y, depth)
    dims = Dims(t_ini=t_ini, horizon=horizon, n=n, samples=T, cols=T - depth + 1)

    pe_order = depth + 2 * n
    pe_ok = T - pe_order + 1 >= pe_order and is_persistently_exciting(u, pe_order)
    if not pe_ok:
        warnings.warn(f"input data is not persistently exciting of order {pe_order}; "
                      "prediction accuracy is not guaranteed", stacklevel=2)

    return HankelBlocks(
        up=Hu[:t_ini, :], uf=Hu[t_ini:, :],
        ep=He[:t_ini, :], ef=He[t_ini:, :],
        yp=Hy[:p * t_ini, :], yf=Hy[p * t_ini:, :],
        dims=dims, pe_ok=pe_ok,
    )


@dataclass
class OfflineDataset:
    """Recorded excitation experiment around a fixed cruise equilibrium."""

    u: np.ndarray        # (T,) CAV acceleration
    eps: np.ndarray      # (T,) head-vehicle velocity error
    y: np.ndarray        # (T, p) output samples
    dt: float
    v_star: float
    s_star: float
    seed: int

    @property
    def samples(self) -> int:
        return self.u.shape[0]

    def save_csv(self, path) -> None:
        p = self.y.shape[1]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["k", "u", "eps"] + [f"y{i+1}" for i in range(p)])
            for k in range(self.samples):
                writer.writerow([k, repr(float(self.u[k])), repr(float(self.eps[k]))]
                                + [repr(float(v)) for v in self.y[k]])


def load_dataset_csv(path, dt: float = 0.05, v_star: float = 15.0,
                     s_star: float | None = None, seed: int = -1) -> OfflineDataset:
    """Read a dataset written by OfflineDataset.save_csv."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if len(header) < 4 or header[:3] != ["k", "u", "eps"]:
            raise ValueError("dataset header must start with k,u,eps,y1,...")
        p = len(header) - 3
        rows = list(reader)
    u = np.empty(len(rows))
    eps = np.empty(len(rows))
    y = np.empty((len(rows), p))
    for i, row in enumerate(rows):
        if len(row) != 3 + p:
            raise ValueError(f"row {i} has {len(row)} columns, expected {3 + p}")
        u[i], eps[i] = float(row[1]), float(row[2])
        y[i] = [float(v) for v in row[3:]]
    if s_star is None:
        s_star = equilibrium_spacing(v_star, OvmParams())
    return OfflineDataset(u=u, eps=eps, y=y, dt=dt, v_star=v_star,
                          s_star=s_star, seed=seed)


def collect_offline_data(T: int, seed: int, v_eq: float = 15.0,
                         params: OvmParams | None = None,
                         config: SimConfig | None = None) -> OfflineDataset:
    """Excite the platoon around its cruise equilibrium and record (u, eps, y).

    The CAV applies a uniform random acceleration in [-1, 1] and the head
    vehicle's velocity is scripted to v_eq plus a uniform random error in
    [-1, 1], one independent draw per step. Raises CollectionDiverged if any
    spacing closes to zero while the excitation plays out.
    """
    if T < 1:
        raise ValueError("T must be positive")
    params = params or OvmParams()
    config = config or SimConfig()
    sim_seq, draw_seq = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(draw_seq)
    u_draw = rng.uniform(-1.0, 1.0, size=T)
    e_draw = rng.uniform(-1.0, 1.0, size=T)

    sim = TrafficSim(seed=sim_seq, v_init=v_eq, params=params, config=config,
                     cav_mode="external", head_mode="scripted")
    s_eq = equilibrium_spacing(v_eq, params)
    sim.set_head_velocity(v_eq + e_draw[0])

    p = traffic.N_VEHICLES - traffic.CAV_IDX + 1
    y = np.empty((T, p))
    eps = np.empty(T)
    for k in range(T):
        eps[k], y[k] = sim.measure(v_eq, s_eq)
        head_next = v_eq + (e_draw[k + 1] if k + 1 < T else e_draw[T - 1])
        result = sim.step(cav_accel=u_draw[k], head_velocity=head_next)
        if result.collision:
            raise CollectionDiverged(step=k + 1)
    return OfflineDataset(u=u_draw, eps=eps, y=y, dt=config.dt, v_star=v_eq,
                          s_star=s_eq, seed=seed)
