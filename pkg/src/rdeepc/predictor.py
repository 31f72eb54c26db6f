"""Behavioral predictor built from raw trajectory data.

The stacked past/future Hankel blocks form a linear map whose least-squares
inverse turns a measured initial window plus a candidate future input and
disturbance into a predicted future output. The same blocks also yield the
non-robust trajectory-tracking program solved by the baseline controller.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .conic import ConicProgram, add_quadratic_epigraph, psd_factor
from .data_engine import RANK_RTOL, HankelBlocks


@dataclass(frozen=True)
class TargetSlots:
    """Row slices of the stacked target vector b = col(past inputs,
    past disturbances, past outputs, future inputs, future disturbances)."""

    u_ini: slice
    e_ini: slice
    y_ini: slice
    u_fut: slice
    e_fut: slice

    @staticmethod
    def make(t_ini: int, horizon: int, p: int) -> "TargetSlots":
        y0 = 2 * t_ini
        uf0 = y0 + p * t_ini
        ef0 = uf0 + horizon
        return TargetSlots(slice(0, t_ini), slice(t_ini, 2 * t_ini),
                           slice(y0, uf0), slice(uf0, ef0),
                           slice(ef0, ef0 + horizon))


@dataclass
class PredictorCore:
    """Cached least-squares machinery for one offline dataset.

    stack      stacked past blocks plus future input/disturbance blocks (r x q)
    pinv       its pseudo-inverse (q x r)
    output_map future-output block times pinv (p*N x r)
    pinv_gram  pinv' pinv (r x r), the coefficient-vector norm in target space
    rank       numerical rank of the stack
    """

    stack: np.ndarray
    pinv: np.ndarray
    output_map: np.ndarray
    pinv_gram: np.ndarray
    rank: int
    slots: TargetSlots
    blocks: HankelBlocks

    @property
    def dims(self):
        return self.blocks.dims

    @property
    def target_rows(self) -> int:
        return self.stack.shape[0]


@dataclass(frozen=True)
class InitialWindow:
    """Most recent T_ini samples of (input, disturbance, output)."""

    u_ini: np.ndarray
    e_ini: np.ndarray
    y_ini: np.ndarray  # (T_ini, p)

    def __post_init__(self):
        object.__setattr__(self, "u_ini", np.asarray(self.u_ini, dtype=float).ravel())
        object.__setattr__(self, "e_ini", np.asarray(self.e_ini, dtype=float).ravel())
        y = np.asarray(self.y_ini, dtype=float)
        if y.ndim == 1:
            raise ValueError("y_ini must be 2-D (T_ini, p)")
        object.__setattr__(self, "y_ini", y)
        t = self.u_ini.shape[0]
        if self.e_ini.shape[0] != t or y.shape[0] != t:
            raise ValueError("initial window lengths disagree")

    @property
    def t_ini(self) -> int:
        return self.u_ini.shape[0]

    @property
    def y_flat(self) -> np.ndarray:
        return self.y_ini.ravel()

    def matches(self, core: PredictorCore) -> bool:
        d = core.dims
        return self.t_ini == d.t_ini and self.y_ini.shape[1] == d.p


def assemble_core(blocks: HankelBlocks) -> PredictorCore:
    """Stack the data blocks and compute the rank-revealing pseudo-inverse."""
    stack = np.vstack([blocks.up, blocks.ep, blocks.yp, blocks.uf, blocks.ef])
    u_svd, s, vt = np.linalg.svd(stack, full_matrices=False)
    cutoff = RANK_RTOL * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > cutoff))
    if rank == 0:
        raise ValueError("degenerate data: stacked Hankel blocks have rank zero")
    inv_s = np.zeros_like(s)
    inv_s[:rank] = 1.0 / s[:rank]
    pinv = (vt[:rank].T * inv_s[:rank]) @ u_svd[:, :rank].T
    d = blocks.dims
    return PredictorCore(stack=stack, pinv=pinv, output_map=blocks.yf @ pinv,
                         pinv_gram=pinv.T @ pinv, rank=rank,
                         slots=TargetSlots.make(d.t_ini, d.horizon, d.p),
                         blocks=blocks)


def build_target(core: PredictorCore, ini: InitialWindow, u, eps,
                 sigma_y=None) -> np.ndarray:
    """Assemble the stacked target vector matching the core's row layout."""
    if not ini.matches(core):
        raise ValueError("initial window does not match predictor dimensions")
    d = core.dims
    u = np.asarray(u, dtype=float).ravel()
    eps = np.asarray(eps, dtype=float).ravel()
    if u.shape[0] != d.horizon or eps.shape[0] != d.horizon:
        raise ValueError("future input/disturbance must have horizon length")
    y = ini.y_flat
    if sigma_y is not None:
        sigma_y = np.asarray(sigma_y, dtype=float).ravel()
        if sigma_y.shape[0] != y.shape[0]:
            raise ValueError("output slack has wrong length")
        y = y + sigma_y
    return np.concatenate([ini.u_ini, ini.e_ini, y, u, eps])


def predict(core: PredictorCore, ini: InitialWindow, u, eps,
            sigma_y=None) -> np.ndarray:
    """Predicted future output, flat length p*N (per-step blocks of p)."""
    return core.output_map @ build_target(core, ini, u, eps, sigma_y)


@dataclass(frozen=True)
class CostWeights:
    """Quadratic stage costs and regularization strengths."""

    velocity_weight: float = 1.0
    spacing_weight: float = 0.5
    input_weight: float = 0.1
    g_penalty: float = 100.0
    slack_penalty: float = 1e4

    def __post_init__(self):
        if self.velocity_weight < 0 or self.spacing_weight < 0:
            raise ValueError("output weights must be nonnegative")
        if self.input_weight <= 0:
            raise ValueError("input weight must be positive")
        if self.g_penalty <= 0 or self.slack_penalty <= 0:
            raise ValueError("regularization penalties must be positive")

    def output_weights(self, p: int, horizon: int) -> np.ndarray:
        """Per-coordinate weights of the flattened future output: each step
        weighs p-1 velocity errors then one spacing error."""
        step = np.full(p, self.velocity_weight)
        step[-1] = self.spacing_weight
        return np.tile(step, horizon)


@dataclass(frozen=True)
class ControlBounds:
    """Box limits used by the program builders.

    Spacing bounds live in whatever frame the outputs are expressed in; the
    closed loop passes error-frame values (raw bounds minus the equilibrium
    spacing).
    """

    spacing_min: float = -15.0
    spacing_max: float = 20.0
    input_min: float = -5.0
    input_max: float = 2.0

    def __post_init__(self):
        if self.spacing_min > self.spacing_max:
            raise ValueError("spacing_min exceeds spacing_max")
        if self.input_min > self.input_max:
            raise ValueError("input_min exceeds input_max")


def spacing_selector(p: int, horizon: int) -> sp.csr_matrix:
    """Selector picking the spacing coordinate of every future step."""
    rows = np.arange(horizon)
    cols = p * rows + (p - 1)
    return sp.csr_matrix((np.ones(horizon), (rows, cols)),
                         shape=(horizon, p * horizon))


def baseline_hessian(blocks: HankelBlocks, weights: CostWeights) -> np.ndarray:
    """Quadratic form of the baseline objective over the coefficient vector."""
    d = blocks.dims
    qv = weights.output_weights(d.p, d.horizon)
    h = (blocks.yf.T * qv) @ blocks.yf
    h += weights.input_weight * blocks.uf.T @ blocks.uf
    h += weights.slack_penalty * blocks.yp.T @ blocks.yp
    h[np.diag_indices_from(h)] += weights.g_penalty
    return 0.5 * (h + h.T)


def baseline_hessian_factor(blocks: HankelBlocks, weights: CostWeights) -> np.ndarray:
    """Factor F with F'F equal to the baseline Hessian."""
    return psd_factor(baseline_hessian(blocks, weights))


def assemble_baseline(blocks: HankelBlocks, ini: InitialWindow,
                      weights: CostWeights, bounds: ControlBounds,
                      encoding: str = "soc",
                      hessian_factor: np.ndarray | None = None) -> ConicProgram:
    """Non-robust tracking program over the coefficient vector g.

    Minimizes the weighted output and input energies plus the coefficient
    and output-slack regularizers, subject to matching the initial window,
    zero future disturbance, spacing bounds on the predicted spacing error,
    and the input box. The output slack is eliminated in closed form
    (slack = past-output rows times g, minus the measured window).

    encoding "soc" adds an epigraph variable and a cone block (linear
    objective only); encoding "qp" states the quadratic cost natively.
    """
    if encoding not in ("soc", "qp"):
        raise ValueError("encoding must be 'soc' or 'qp'")
    d = blocks.dims
    if ini.t_ini != d.t_ini or ini.y_ini.shape[1] != d.p:
        raise ValueError("initial window does not match data dimensions")
    q = d.cols
    y_flat = ini.y_flat
    lin = -2.0 * weights.slack_penalty * (blocks.yp.T @ y_flat)
    const = weights.slack_penalty * float(y_flat @ y_flat)

    n_vars = q + 1 if encoding == "soc" else q
    prog = ConicProgram(n_vars)
    prog.var_slices = {"g": slice(0, q)}
    g_cols = np.arange(q)

    def widen(mat):
        m = sp.csr_matrix(mat)
        if encoding == "soc":
            m = sp.hstack([m, sp.csr_matrix((m.shape[0], 1))], format="csr")
        return m

    prog.add_eq(widen(blocks.up), ini.u_ini)
    prog.add_eq(widen(blocks.ep), ini.e_ini)
    prog.add_eq(widen(blocks.ef), np.zeros(d.horizon))
    sel = spacing_selector(d.p, d.horizon)
    prog.add_ineq(widen(sel @ blocks.yf), bounds.spacing_min, bounds.spacing_max)
    prog.add_ineq(widen(blocks.uf), bounds.input_min, bounds.input_max)

    if encoding == "soc":
        prog.var_slices["epi"] = slice(q, q + 1)
        c = np.zeros(n_vars)
        c[q] = 1.0
        prog.objective = c
        prog.objective_const = const
        factor = hessian_factor if hessian_factor is not None \
            else baseline_hessian_factor(blocks, weights)
        add_quadratic_epigraph(prog, factor, lin, q, var_indices=g_cols)
    else:
        prog.set_quad_objective(sp.csc_matrix(baseline_hessian(blocks, weights)))
        prog.objective = lin
        prog.objective_const = const
    return prog
