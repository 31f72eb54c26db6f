"""Reduction of the robust tracking problem and its deterministic forms.

Substituting the least-squares coefficient vector into the tracking objective
leaves a quadratic in x = col(future inputs, output slack, disturbance
anchors). The worst case over the disturbance box is then made explicit in
one of two ways: enforcing the epigraph and spacing constraints at every box
vertex, or replacing each row-wise worst case by its linear-programming dual.
Both yield ordinary convex programs with identical optima.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .conic import ConicProgram, add_quadratic_epigraph, psd_factor
from .predictor import (ControlBounds, CostWeights, InitialWindow,
                        PredictorCore, spacing_selector)
from .uncertainty import DisturbancePolytope, enumerate_vertices

ENCODINGS = ("per_vertex", "shared", "qp")


class InfeasibleSpacingBand(RuntimeError):
    """Raised when the robustified spacing window is empty before solving."""


@dataclass(frozen=True)
class ReducedDims:
    horizon: int
    t_ini: int
    p: int
    n_w: int

    @property
    def dim_free(self) -> int:
        """Length of the truly free block (inputs then output slack)."""
        return self.horizon + self.p * self.t_ini

    @property
    def dim_x(self) -> int:
        return self.dim_free + self.n_w


@dataclass
class ReducedProblem:
    """Quadratic data of the reduced problem over x = (u, slack, eps).

    quad/lin/const_term give the tracking objective as x'quad x + lin'x +
    const_term; spacing_mat x + spacing_off is the predicted CAV spacing
    error; input_selector x recovers u. const_term is never sent to a
    solver, only kept for objective accounting.
    """

    quad: np.ndarray
    lin: np.ndarray
    const_term: float
    spacing_mat: np.ndarray
    spacing_off: np.ndarray
    input_selector: sp.csr_matrix
    bounds: ControlBounds
    dims: ReducedDims
    interp: np.ndarray | None = None
    _dd_factor: np.ndarray | None = field(default=None, repr=False)

    # -- block views over the (free, eps) split ------------------------------
    @property
    def free_slice(self) -> slice:
        return slice(0, self.dims.dim_free)

    @property
    def eps_slice(self) -> slice:
        return slice(self.dims.dim_free, self.dims.dim_x)

    @property
    def quad_dd(self) -> np.ndarray:
        return self.quad[self.free_slice, self.free_slice]

    @property
    def quad_de(self) -> np.ndarray:
        return self.quad[self.free_slice, self.eps_slice]

    @property
    def quad_ee(self) -> np.ndarray:
        return self.quad[self.eps_slice, self.eps_slice]

    @property
    def lin_d(self) -> np.ndarray:
        return self.lin[self.free_slice]

    @property
    def lin_e(self) -> np.ndarray:
        return self.lin[self.eps_slice]

    @property
    def spacing_free(self) -> np.ndarray:
        return self.spacing_mat[:, self.free_slice]

    @property
    def spacing_eps(self) -> np.ndarray:
        return self.spacing_mat[:, self.eps_slice]

    def objective_value(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(x @ self.quad @ x + self.lin @ x) + self.const_term

    def dd_factor(self) -> np.ndarray:
        if self._dd_factor is None:
            self._dd_factor = psd_factor(self.quad_dd)
        return self._dd_factor


class Reducer:
    """Per-dataset constant pieces of the reduction.

    The quadratic form, the spacing map, and all block couplings depend only
    on the offline data and the weights; only the linear terms and offsets
    move with the measured window, so a receding-horizon loop reuses one
    Reducer and calls problem() per step.
    """

    def __init__(self, core: PredictorCore, weights: CostWeights,
                 interp: np.ndarray | None = None):
        d = core.dims
        n_w = d.horizon if interp is None else interp.shape[1]
        if interp is not None and interp.shape[0] != d.horizon:
            raise ValueError("interpolation map must have horizon rows")
        self.core = core
        self.weights = weights
        self.interp = None if interp is None else np.asarray(interp, dtype=float)
        self.dims = ReducedDims(d.horizon, d.t_ini, d.p, n_w)

        qv = weights.output_weights(d.p, d.horizon)
        phi = core.output_map
        kern = (phi.T * qv) @ phi + weights.g_penalty * core.pinv_gram
        self.kernel = 0.5 * (kern + kern.T)
        self.spacing_map = spacing_selector(d.p, d.horizon) @ phi  # N x r

        s = core.slots
        ku, ks, ke = s.u_fut, s.y_ini, s.e_fut
        e_map = self.interp
        dx, df = self.dims.dim_x, self.dims.dim_free
        n, pt = d.horizon, d.p * d.t_ini
        iu, is_, ie = slice(0, n), slice(n, n + pt), slice(df, dx)

        quad = np.zeros((dx, dx))
        quad[iu, iu] = self.kernel[ku, ku]
        quad[iu, is_] = self.kernel[ku, ks]
        quad[is_, is_] = self.kernel[ks, ks]
        k_ue = self.kernel[ku, ke]
        k_se = self.kernel[ks, ke]
        k_ee = self.kernel[ke, ke]
        if e_map is not None:
            k_ue = k_ue @ e_map
            k_se = k_se @ e_map
            k_ee = e_map.T @ k_ee @ e_map
        quad[iu, ie] = k_ue
        quad[is_, ie] = k_se
        quad[ie, ie] = k_ee
        quad[iu.start:iu.stop, iu.start:iu.stop] += \
            weights.input_weight * np.eye(n)
        quad[is_, is_] += weights.slack_penalty * np.eye(pt)
        quad = np.triu(quad)
        self.quad = quad + np.triu(quad, 1).T

        spacing = np.zeros((n, dx))
        spacing[:, iu] = self.spacing_map[:, ku]
        spacing[:, is_] = self.spacing_map[:, ks]
        spacing[:, ie] = self.spacing_map[:, ke] if e_map is None \
            else self.spacing_map[:, ke] @ e_map
        self.spacing = spacing

        self.input_selector = sp.csr_matrix(
            (np.ones(n), (np.arange(n), np.arange(n))), shape=(n, dx))
        self._slots = (ku, ks, ke)

    def target_offset(self, ini: InitialWindow) -> np.ndarray:
        d = self.core.dims
        if ini.t_ini != d.t_ini or ini.y_ini.shape[1] != d.p:
            raise ValueError("initial window does not match data dimensions")
        return np.concatenate([ini.u_ini, ini.e_ini, ini.y_flat,
                               np.zeros(2 * d.horizon)])

    def linear_terms(self, ini: InitialWindow):
        """(lin, const_term, spacing_off) for the measured window."""
        b0 = self.target_offset(ini)
        v = self.kernel @ b0
        ku, ks, ke = self._slots
        lin = np.empty(self.dims.dim_x)
        lin[:self.dims.horizon] = 2.0 * v[ku]
        lin[self.dims.horizon:self.dims.dim_free] = 2.0 * v[ks]
        tail = 2.0 * v[ke] if self.interp is None else 2.0 * (self.interp.T @ v[ke])
        lin[self.dims.dim_free:] = tail
        return lin, float(b0 @ v), self.spacing_map @ b0

    def problem(self, ini: InitialWindow, bounds: ControlBounds) -> ReducedProblem:
        lin, const_term, spacing_off = self.linear_terms(ini)
        return ReducedProblem(quad=self.quad, lin=lin, const_term=const_term,
                              spacing_mat=self.spacing, spacing_off=spacing_off,
                              input_selector=self.input_selector, bounds=bounds,
                              dims=self.dims, interp=self.interp)

    @property
    def horizon(self) -> int:
        return self.dims.horizon


def reduce(core: PredictorCore, ini: InitialWindow, weights: CostWeights,
           bounds: ControlBounds, interp: np.ndarray | None = None) -> ReducedProblem:
    """One-shot reduction; receding-horizon loops should keep a Reducer."""
    return Reducer(core, weights, interp).problem(ini, bounds)


def _check_poly(rp: ReducedProblem, poly: DisturbancePolytope) -> None:
    if poly.dim != rp.dims.n_w:
        raise ValueError(f"disturbance set has dimension {poly.dim}, "
                         f"problem expects {rp.dims.n_w}")


def _vertex_terms(rp: ReducedProblem, verts: np.ndarray):
    """Per-vertex linear coefficient rows and constants of the objective."""
    lin_rows = rp.lin_d[None, :] + 2.0 * (verts @ rp.quad_de.T)
    consts = np.einsum("vi,ij,vj->v", verts, rp.quad_ee, verts) + verts @ rp.lin_e
    return lin_rows, consts


def _pad(matrix: np.ndarray, num_vars: int) -> sp.csr_matrix:
    m = sp.csr_matrix(matrix)
    return sp.hstack([m, sp.csr_matrix((m.shape[0], num_vars - m.shape[1]))],
                     format="csr")


def _encode_objective(prog: ConicProgram, rp: ReducedProblem,
                      verts: np.ndarray, encoding: str, epi_index: int,
                      aux_index: int | None = None) -> None:
    """Install min over the epigraph variable of the worst-vertex objective.

    per_vertex: one cone block per vertex (the reference encoding).
    shared: one cone block for the common quadratic plus per-vertex linear rows.
    qp: native quadratic objective plus per-vertex linear rows; the epigraph
        variable then only carries the vertex-dependent part.
    All three leave the optimal value and the optimal (u, slack) unchanged.
    """
    df = rp.dims.dim_free
    lin_rows, consts = _vertex_terms(rp, verts)
    free_cols = np.arange(df)
    if encoding == "per_vertex":
        c = np.zeros(prog.num_vars)
        c[epi_index] = 1.0
        prog.objective = c
        factor = rp.dd_factor()
        for j in range(verts.shape[0]):
            add_quadratic_epigraph(prog, factor, lin_rows[j], epi_index,
                                   var_indices=free_cols,
                                   constant=float(consts[j]))
    elif encoding == "shared":
        c = np.zeros(prog.num_vars)
        c[epi_index] = 1.0
        prog.objective = c
        add_quadratic_epigraph(prog, rp.dd_factor(), np.zeros(df), aux_index,
                               var_indices=free_cols)
        rows = np.zeros((verts.shape[0], prog.num_vars))
        rows[:, :df] = lin_rows
        rows[:, epi_index] = -1.0
        rows[:, aux_index] = 1.0
        prog.add_ineq(sp.csr_matrix(rows), -np.inf, -consts)
    elif encoding == "qp":
        quad = sp.lil_matrix((prog.num_vars, prog.num_vars))
        quad[:df, :df] = rp.quad_dd
        prog.set_quad_objective(sp.csc_matrix(quad))
        c = np.zeros(prog.num_vars)
        c[:df] = rp.lin_d
        c[epi_index] = 1.0
        prog.objective = c
        rows = np.zeros((verts.shape[0], prog.num_vars))
        rows[:, :df] = lin_rows - rp.lin_d[None, :]
        rows[:, epi_index] = -1.0
        prog.add_ineq(sp.csr_matrix(rows), -np.inf, -consts)
    else:
        raise ValueError(f"unknown objective encoding '{encoding}'")


def _core_sizes(rp: ReducedProblem, encoding: str):
    df = rp.dims.dim_free
    if encoding == "shared":
        return df + 2, df, df + 1
    return df + 1, df, None


def _finish_common(prog: ConicProgram, rp: ReducedProblem) -> None:
    df = rp.dims.dim_free
    n = rp.dims.horizon
    prog.var_slices.setdefault("u", slice(0, n))
    prog.var_slices.setdefault("slack", slice(n, df))
    sel = sp.csr_matrix((np.ones(n), (np.arange(n), np.arange(n))),
                        shape=(n, prog.num_vars))
    prog.add_ineq(sel, rp.bounds.input_min, rp.bounds.input_max)


def vertex_program(rp: ReducedProblem, poly: DisturbancePolytope,
                   encoding: str = "per_vertex") -> ConicProgram:
    """Robust program enforcing objective and spacing rows at every vertex."""
    _check_poly(rp, poly)
    verts = enumerate_vertices(poly)
    num_vars, epi, aux = _core_sizes(rp, encoding)
    prog = ConicProgram(num_vars)
    prog.var_slices["epi"] = slice(epi, epi + 1)
    _encode_objective(prog, rp, verts, encoding, epi, aux)

    spacing = _pad(rp.spacing_free, num_vars)
    shift = verts @ rp.spacing_eps.T + rp.spacing_off[None, :]  # (n_verts, N)
    for j in range(verts.shape[0]):
        prog.add_ineq(spacing, rp.bounds.spacing_min - shift[j],
                      rp.bounds.spacing_max - shift[j])
    _finish_common(prog, rp)
    return prog


def box_support(coeffs: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    """Row-wise support function of the box: max over w in [lower, upper]
    of coeffs @ w."""
    return np.maximum(coeffs * lower, coeffs * upper).sum(axis=1)


def dual_program(rp: ReducedProblem, poly: DisturbancePolytope,
                 encoding: str = "per_vertex",
                 eliminate_multipliers: bool = False) -> ConicProgram:
    """Robust program with the row-wise worst cases dualized.

    The objective still uses vertex enumeration (the quadratic's maximum
    over a box sits at a vertex; no LP dual applies). Each spacing row's
    worst case becomes multiplier variables and linear rows. With
    eliminate_multipliers the box's inner LPs are solved in closed form
    (support function) and only the tightened two-sided rows remain; the
    feasible (u, slack) set is identical.
    """
    _check_poly(rp, poly)
    verts = enumerate_vertices(poly)
    n, n_w = rp.dims.horizon, rp.dims.n_w
    core_vars, epi, aux = _core_sizes(rp, encoding)
    num_vars = core_vars if eliminate_multipliers else core_vars + 4 * n * n_w
    prog = ConicProgram(num_vars)
    prog.var_slices["epi"] = slice(epi, epi + 1)
    _encode_objective(prog, rp, verts, encoding, epi, aux)

    if eliminate_multipliers:
        gain_up = box_support(rp.spacing_eps, poly.lower, poly.upper)
        gain_lo = box_support(-rp.spacing_eps, poly.lower, poly.upper)
        lower = rp.bounds.spacing_min - rp.spacing_off + gain_lo
        upper = rp.bounds.spacing_max - rp.spacing_off - gain_up
        if np.any(lower > upper):
            raise InfeasibleSpacingBand(
                "robustified spacing window is empty at "
                f"{int(np.sum(lower > upper))} of {n} steps")
        prog.add_ineq(_pad(rp.spacing_free, num_vars), lower, upper)
        prog.var_slices["multipliers"] = slice(core_vars, core_vars)
    else:
        b_vec = np.concatenate([poly.upper, -poly.lower])  # box rhs [I; -I] w <= b
        lam0 = core_vars
        prog.var_slices["multipliers"] = slice(lam0, num_vars)

        # equality rows tying each multiplier pair to its spacing-eps row
        rows, cols, vals, rhs = [], [], [], []
        r = 0
        for l in range(n):
            up_base = lam0 + 4 * n_w * l
            lo_base = up_base + 2 * n_w
            for i in range(n_w):
                rows += [r, r]
                cols += [up_base + i, up_base + n_w + i]
                vals += [1.0, -1.0]
                rhs.append(rp.spacing_eps[l, i])
                r += 1
                rows += [r, r]
                cols += [lo_base + i, lo_base + n_w + i]
                vals += [1.0, -1.0]
                rhs.append(-rp.spacing_eps[l, i])
                r += 1
        eq = sp.csr_matrix((vals, (rows, cols)), shape=(r, num_vars))
        prog.add_eq(eq, np.array(rhs))

        # one-sided worst-case rows per step, upper then lower side
        rows, cols, vals = [], [], []
        ub = np.empty(2 * n)
        for l in range(n):
            up_base = lam0 + 4 * n_w * l
            lo_base = up_base + 2 * n_w
            rr = 2 * l
            nz = np.nonzero(rp.spacing_free[l])[0]
            rows += [rr] * len(nz)
            cols += list(nz)
            vals += list(rp.spacing_free[l, nz])
            rows += [rr] * (2 * n_w)
            cols += list(range(up_base, up_base + 2 * n_w))
            vals += list(b_vec)
            ub[rr] = rp.bounds.spacing_max - rp.spacing_off[l]
            rr += 1
            rows += [rr] * len(nz)
            cols += list(nz)
            vals += list(-rp.spacing_free[l, nz])
            rows += [rr] * (2 * n_w)
            cols += list(range(lo_base, lo_base + 2 * n_w))
            vals += list(b_vec)
            ub[rr] = rp.spacing_off[l] - rp.bounds.spacing_min
        worst = sp.csr_matrix((vals, (rows, cols)), shape=(2 * n, num_vars))
        prog.add_ineq(worst, -np.inf, ub)

        lam_count = 4 * n * n_w
        nonneg = sp.csr_matrix(
            (np.ones(lam_count),
             (np.arange(lam_count), np.arange(lam0, num_vars))),
            shape=(lam_count, num_vars))
        prog.add_ineq(nonneg, 0.0, np.inf)

    _finish_common(prog, rp)
    return prog


def extract_inputs(prog: ConicProgram, x: np.ndarray) -> np.ndarray:
    """Optimal future input sequence from a solved program's point."""
    return x[prog.var_slices["u"]]


COMPLEXITY_METHODS = ("M1", "M2", "M1L", "M2L")


def complexity(method: str, t_ini: int, horizon: int, tracked: int,
               anchors: int | None = None) -> dict:
    """Exact variable and constraint counts of the four program families.

    tracked is the number of velocity outputs per step (the per-step output
    has tracked+1 coordinates); anchors is the down-sampled disturbance
    dimension, required for the L variants. Counts are exact integers.
    """
    if method not in COMPLEXITY_METHODS:
        raise ValueError(f"method must be one of {COMPLEXITY_METHODS}")
    for name, val in (("t_ini", t_ini), ("horizon", horizon), ("tracked", tracked)):
        if not isinstance(val, (int, np.integer)) or val < 1:
            raise ValueError(f"{name} must be a positive integer")
    t, n, nn = int(t_ini), int(horizon), int(tracked)
    base_vars = (nn + 1) * t + n + 1
    if method in ("M1L", "M2L"):
        if anchors is None:
            raise ValueError("down-sampled methods need the anchor count")
        a = int(anchors)
    else:
        a = n
    if method in ("M1", "M1L"):
        return {"num_vars": base_vars,
                "num_constraints": 2 ** a + n * 2 ** (a + 1) + 2 * n}
    return {"num_vars": base_vars + 4 * n * a,
            "num_constraints": 2 ** a + 2 * n * (3 * a + 2)}
