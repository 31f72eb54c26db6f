"""Solver-agnostic convex program container and solver adapters.

A ConicProgram holds a linear (optionally plus quadratic) objective, linear
equality rows, two-sided linear inequality rows, and second-order-cone
blocks of the form ||A x + b||_2 <= c^T x + d. Quadratic costs enter either
natively through `quad_objective` or through `add_quadratic_epigraph`, which
rewrites  x'Mx + lin'x + const <= t  as a single cone block.

Backends (registered in SOLVERS):
  * "clarabel" - interior point, handles every program here; the default.
  * "scs"      - first-order conic solver, available when the scs package is.
  * "osqp"     - QP-only (rejects cone blocks); supports warm-started
                 re-solves through OsqpSession for receding-horizon loops.

All backends are deterministic for a fixed program.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
NUMERICAL_FAILURE = "numerical_failure"

DEFAULT_TOL = 1e-8


def _csr(matrix, width: int) -> sp.csr_matrix:
    m = sp.csr_matrix(matrix)
    if m.shape[1] != width:
        raise ValueError(f"matrix has {m.shape[1]} columns, expected {width}")
    return m


@dataclass
class SocBlock:
    """||matrix @ x + offset||_2 <= lin @ x + const"""

    matrix: sp.csr_matrix
    offset: np.ndarray
    lin: np.ndarray
    const: float


@dataclass
class ConicProgram:
    num_vars: int
    objective: np.ndarray = None                 # linear cost, dense (num_vars,)
    quad_objective: sp.csc_matrix | None = None  # symmetric H; cost adds x'Hx
    objective_const: float = 0.0
    soc_blocks: list[SocBlock] = field(default_factory=list)
    var_slices: dict = field(default_factory=dict)
    _eq: list = field(default_factory=list)
    _ineq: list = field(default_factory=list)

    def __post_init__(self):
        if self.num_vars < 1:
            raise ValueError("program needs at least one variable")
        if self.objective is None:
            self.objective = np.zeros(self.num_vars)
        self.objective = np.asarray(self.objective, dtype=float)
        if self.objective.shape != (self.num_vars,):
            raise ValueError("objective length must equal num_vars")

    # -- construction ------------------------------------------------------
    def add_eq(self, matrix, rhs) -> None:
        rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
        m = _csr(matrix, self.num_vars)
        if m.shape[0] != rhs.shape[0]:
            raise ValueError("equality rows and rhs disagree")
        self._eq.append((m, rhs))

    def add_ineq(self, matrix, lower, upper) -> None:
        m = _csr(matrix, self.num_vars)
        lower = np.broadcast_to(np.asarray(lower, dtype=float), (m.shape[0],)).copy()
        upper = np.broadcast_to(np.asarray(upper, dtype=float), (m.shape[0],)).copy()
        if np.any(lower > upper):
            raise ValueError("inequality lower bound exceeds upper bound")
        self._ineq.append((m, lower, upper))

    def add_soc(self, matrix, offset, lin, const) -> None:
        m = _csr(matrix, self.num_vars)
        offset = np.asarray(offset, dtype=float)
        lin = np.asarray(lin, dtype=float)
        if m.shape[0] != offset.shape[0] or lin.shape != (self.num_vars,):
            raise ValueError("inconsistent cone block shapes")
        if m.shape[0] < 2:
            raise ValueError("cone norm part needs at least 2 rows")
        self.soc_blocks.append(SocBlock(m, offset, lin, float(const)))

    def set_quad_objective(self, H) -> None:
        H = sp.csc_matrix(H)
        if H.shape != (self.num_vars, self.num_vars):
            raise ValueError("quadratic objective must be num_vars x num_vars")
        self.quad_objective = H

    # -- assembled views ---------------------------------------------------
    @property
    def eq_matrix(self) -> sp.csr_matrix:
        if not self._eq:
            return sp.csr_matrix((0, self.num_vars))
        return sp.vstack([m for m, _ in self._eq], format="csr")

    @property
    def eq_rhs(self) -> np.ndarray:
        if not self._eq:
            return np.zeros(0)
        return np.concatenate([b for _, b in self._eq])

    @property
    def ineq_matrix(self) -> sp.csr_matrix:
        if not self._ineq:
            return sp.csr_matrix((0, self.num_vars))
        return sp.vstack([m for m, _, _ in self._ineq], format="csr")

    @property
    def ineq_lower(self) -> np.ndarray:
        if not self._ineq:
            return np.zeros(0)
        return np.concatenate([lo for _, lo, _ in self._ineq])

    @property
    def ineq_upper(self) -> np.ndarray:
        if not self._ineq:
            return np.zeros(0)
        return np.concatenate([up for _, _, up in self._ineq])

    def objective_value(self, x: np.ndarray) -> float:
        val = float(self.objective @ x) + self.objective_const
        if self.quad_objective is not None:
            val += float(x @ (self.quad_objective @ x))
        return val

    def one_sided_constraint_count(self) -> int:
        """Constraint count with two-sided rows counted once per finite side
        and each cone block counted as one constraint."""
        count = sum(m.shape[0] for m, _ in self._eq) + len(self.soc_blocks)
        for _, lo, up in self._ineq:
            count += int(np.sum(np.isfinite(lo))) + int(np.sum(np.isfinite(up)))
        return count


def psd_factor(matrix, tol: float = 1e-10) -> np.ndarray:
    """Factor F with F'F equal to the symmetric part of `matrix` after
    projecting round-off negative eigenvalues to zero.

    Eigenvalues below tol (scaled by the largest magnitude) are treated as
    zero and their rows dropped; a single zero row is returned for the zero
    matrix so epigraph encodings stay well-formed.
    """
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("psd_factor needs a square matrix")
    m = 0.5 * (m + m.T)
    vals, vecs = np.linalg.eigh(m)
    scale = float(np.max(np.abs(vals))) if vals.size else 0.0
    keep = vals > tol * max(scale, 1.0)
    if not np.any(keep):
        return np.zeros((1, m.shape[0]))
    return np.sqrt(vals[keep])[:, None] * vecs[:, keep].T


def add_quadratic_epigraph(prog: ConicProgram, factor, lin, epi_index: int,
                           var_indices=None, constant: float = 0.0) -> SocBlock:
    """Append a cone block enforcing x' F'F x + lin'x + constant <= x[epi].

    `factor` is F with columns over `var_indices` (default: all variables
    except the epigraph one). Uses the rotated-cone identity
    ||(2Fx, 1 - s)||_2 <= 1 + s with s = t - lin'x - constant.
    """
    F = np.atleast_2d(np.asarray(factor, dtype=float))
    if F.size == 0 or F.shape[0] == 0:
        raise ValueError("epigraph factor must have at least one row")
    n = prog.num_vars
    if var_indices is None:
        var_indices = [i for i in range(n) if i != epi_index]
    var_indices = np.asarray(var_indices, dtype=int)
    if F.shape[1] != var_indices.shape[0]:
        raise ValueError("factor width must match var_indices")
    lin = np.broadcast_to(np.asarray(lin, dtype=float), (var_indices.shape[0],))

    rows, cols, vals = [], [], []
    for i in range(F.shape[0]):
        nz = np.nonzero(F[i])[0]
        rows.extend([i] * len(nz))
        cols.extend(var_indices[nz])
        vals.extend(2.0 * F[i, nz])
    # trailing norm row: lin'x - t
    nz = np.nonzero(lin)[0]
    rows.extend([F.shape[0]] * len(nz))
    cols.extend(var_indices[nz])
    vals.extend(lin[nz])
    rows.append(F.shape[0])
    cols.append(epi_index)
    vals.append(-1.0)
    A = sp.csr_matrix((vals, (rows, cols)), shape=(F.shape[0] + 1, n))
    b = np.zeros(F.shape[0] + 1)
    b[-1] = 1.0 + constant

    c = np.zeros(n)
    c[var_indices] -= lin
    c[epi_index] += 1.0
    prog.add_soc(A, b, c, 1.0 - constant)
    return prog.soc_blocks[-1]


@dataclass
class Solution:
    status: str
    x: np.ndarray | None
    objective_value: float | None
    solve_time: float
    solver: str = ""
    iterations: int | None = None


def _verify_primal(prog: ConicProgram, x: np.ndarray, tol: float) -> bool:
    eq, beq = prog.eq_matrix, prog.eq_rhs
    if eq.shape[0]:
        scale = 1.0 + float(np.max(np.abs(beq)))
        if np.max(np.abs(eq @ x - beq)) > tol * scale:
            return False
    ineq = prog.ineq_matrix
    if ineq.shape[0]:
        lo, up = prog.ineq_lower, prog.ineq_upper
        finite = np.concatenate([lo[np.isfinite(lo)], up[np.isfinite(up)]])
        scale = 1.0 + (float(np.max(np.abs(finite))) if finite.size else 0.0)
        vals = ineq @ x
        viol = np.maximum(np.where(np.isfinite(lo), lo - vals, 0.0),
                          np.where(np.isfinite(up), vals - up, 0.0))
        if np.max(viol, initial=0.0) > tol * scale:
            return False
    for blk in prog.soc_blocks:
        lhs = float(np.linalg.norm(blk.matrix @ x + blk.offset))
        rhs = float(blk.lin @ x) + blk.const
        if lhs - rhs > tol * (1.0 + abs(rhs)):
            return False
    return True


def _clarabel_parts(prog: ConicProgram):
    import clarabel

    chunks, rhs, cones = [], [], []
    eq, beq = prog.eq_matrix, prog.eq_rhs
    if eq.shape[0]:
        chunks.append(eq)
        rhs.append(beq)
        cones.append(clarabel.ZeroConeT(eq.shape[0]))
    ineq = prog.ineq_matrix
    if ineq.shape[0]:
        lo, up = prog.ineq_lower, prog.ineq_upper
        fin_up, fin_lo = np.isfinite(up), np.isfinite(lo)
        rows = []
        vals = []
        if fin_up.any():
            rows.append(ineq[fin_up])
            vals.append(up[fin_up])
        if fin_lo.any():
            rows.append(-ineq[fin_lo])
            vals.append(-lo[fin_lo])
        if rows:
            chunks.append(sp.vstack(rows, format="csr"))
            rhs.append(np.concatenate(vals))
            cones.append(clarabel.NonnegativeConeT(chunks[-1].shape[0]))
    for blk in prog.soc_blocks:
        lin_row = sp.csr_matrix(-blk.lin[None, :])
        chunks.append(sp.vstack([lin_row, -blk.matrix], format="csr"))
        rhs.append(np.concatenate([[blk.const], blk.offset]))
        cones.append(clarabel.SecondOrderConeT(blk.matrix.shape[0] + 1))
    A = sp.vstack(chunks, format="csc") if chunks else sp.csc_matrix((0, prog.num_vars))
    b = np.concatenate(rhs) if rhs else np.zeros(0)
    return A, b, cones


def _solve_clarabel(prog: ConicProgram, tol: float, max_iter: int) -> Solution:
    import clarabel

    A, b, cones = _clarabel_parts(prog)
    if prog.quad_objective is not None:
        P = sp.triu(2.0 * prog.quad_objective, format="csc")
    else:
        P = sp.csc_matrix((prog.num_vars, prog.num_vars))
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = max_iter
    settings.tol_feas = tol / 10.0
    settings.tol_gap_abs = tol / 10.0
    settings.tol_gap_rel = tol / 10.0
    t0 = time.perf_counter()
    solver = clarabel.DefaultSolver(P, prog.objective, sp.csc_matrix(A), b, cones, settings)
    result = solver.solve()
    elapsed = time.perf_counter() - t0

    S = clarabel.SolverStatus
    if result.status in (S.Solved, S.AlmostSolved):
        x = np.asarray(result.x)
        if _verify_primal(prog, x, tol):
            return Solution(OPTIMAL, x, prog.objective_value(x), elapsed,
                            "clarabel", result.iterations)
        return Solution(NUMERICAL_FAILURE, None, None, elapsed, "clarabel",
                        result.iterations)
    if result.status in (S.PrimalInfeasible, S.AlmostPrimalInfeasible):
        return Solution(INFEASIBLE, None, None, elapsed, "clarabel", result.iterations)
    if result.status in (S.DualInfeasible, S.AlmostDualInfeasible):
        return Solution(UNBOUNDED, None, None, elapsed, "clarabel", result.iterations)
    return Solution(NUMERICAL_FAILURE, None, None, elapsed, "clarabel", result.iterations)


def _osqp_parts(prog: ConicProgram):
    if prog.soc_blocks:
        raise ValueError("osqp backend only handles programs without cone blocks")
    mats = [prog.eq_matrix, prog.ineq_matrix]
    A = sp.vstack([m for m in mats if m.shape[0]], format="csc") \
        if any(m.shape[0] for m in mats) else sp.csc_matrix((0, prog.num_vars))
    beq = prog.eq_rhs
    lower = np.concatenate([beq, prog.ineq_lower])
    upper = np.concatenate([beq, prog.ineq_upper])
    if prog.quad_objective is not None:
        P = sp.triu(2.0 * prog.quad_objective, format="csc")
    else:
        P = sp.csc_matrix((prog.num_vars, prog.num_vars))
    return P, A, lower, upper


_OSQP_STATUS = {
    "solved": OPTIMAL,
    "solved inaccurate": OPTIMAL,
    "primal infeasible": INFEASIBLE,
    "primal infeasible inaccurate": INFEASIBLE,
    "dual infeasible": UNBOUNDED,
    "dual infeasible inaccurate": UNBOUNDED,
}


def _solve_osqp(prog: ConicProgram, tol: float, max_iter: int) -> Solution:
    import osqp

    P, A, lower, upper = _osqp_parts(prog)
    solver = osqp.OSQP()
    t0 = time.perf_counter()
    solver.setup(P=P, q=prog.objective, A=A, l=lower, u=upper, verbose=False,
                 eps_abs=tol / 10.0, eps_rel=tol / 10.0, max_iter=max_iter,
                 polishing=False)
    result = solver.solve(raise_error=False)
    elapsed = time.perf_counter() - t0
    return _finish_osqp(prog, result, tol, elapsed)


def _finish_osqp(prog: ConicProgram, result, tol: float, elapsed: float) -> Solution:
    status = _OSQP_STATUS.get(result.info.status, NUMERICAL_FAILURE)
    iters = int(result.info.iter)
    if status == OPTIMAL:
        x = np.asarray(result.x)
        if _verify_primal(prog, x, tol):
            return Solution(OPTIMAL, x, prog.objective_value(x), elapsed, "osqp", iters)
        return Solution(NUMERICAL_FAILURE, None, None, elapsed, "osqp", iters)
    return Solution(status, None, None, elapsed, "osqp", iters)


def _solve_scs(prog: ConicProgram, tol: float, max_iter: int) -> Solution:
    import scs

    chunks, rhs = [], []
    cone = {}
    eq, beq = prog.eq_matrix, prog.eq_rhs
    if eq.shape[0]:
        chunks.append(eq)
        rhs.append(beq)
        cone["z"] = eq.shape[0]
    ineq = prog.ineq_matrix
    if ineq.shape[0]:
        lo, up = prog.ineq_lower, prog.ineq_upper
        fin_up, fin_lo = np.isfinite(up), np.isfinite(lo)
        rows, vals = [], []
        if fin_up.any():
            rows.append(ineq[fin_up])
            vals.append(up[fin_up])
        if fin_lo.any():
            rows.append(-ineq[fin_lo])
            vals.append(-lo[fin_lo])
        if rows:
            chunks.append(sp.vstack(rows, format="csr"))
            rhs.append(np.concatenate(vals))
            cone["l"] = chunks[-1].shape[0]
    socs = []
    for blk in prog.soc_blocks:
        lin_row = sp.csr_matrix(-blk.lin[None, :])
        chunks.append(sp.vstack([lin_row, -blk.matrix], format="csr"))
        rhs.append(np.concatenate([[blk.const], blk.offset]))
        socs.append(blk.matrix.shape[0] + 1)
    if socs:
        cone["q"] = socs
    A = sp.vstack(chunks, format="csc") if chunks else sp.csc_matrix((0, prog.num_vars))
    b = np.concatenate(rhs) if rhs else np.zeros(0)
    data = {"A": A, "b": b, "c": prog.objective}
    if prog.quad_objective is not None:
        data["P"] = sp.triu(2.0 * prog.quad_objective, format="csc")
    t0 = time.perf_counter()
    out = scs.solve(data, cone, verbose=False, eps_abs=tol / 10.0,
                    eps_rel=tol / 10.0, max_iters=max_iter)
    elapsed = time.perf_counter() - t0
    status = out["info"]["status"].lower()
    if "solved" in status and "infeasible" not in status:
        x = np.asarray(out["x"])
        if _verify_primal(prog, x, tol):
            return Solution(OPTIMAL, x, prog.objective_value(x), elapsed, "scs")
        return Solution(NUMERICAL_FAILURE, None, None, elapsed, "scs")
    if "infeasible" in status:
        return Solution(INFEASIBLE, None, None, elapsed, "scs")
    if "unbounded" in status:
        return Solution(UNBOUNDED, None, None, elapsed, "scs")
    return Solution(NUMERICAL_FAILURE, None, None, elapsed, "scs")


SOLVERS = {
    "clarabel": _solve_clarabel,
    "osqp": _solve_osqp,
    "scs": _solve_scs,
}


def available_solvers() -> list[str]:
    names = []
    for name in SOLVERS:
        try:
            __import__(name)
            names.append(name)
        except ImportError:
            continue
    return names


def solve(prog: ConicProgram, solver: str = "clarabel", tol: float = DEFAULT_TOL,
          max_iter: int = 200_000) -> Solution:
    """Solve the program with the named backend and verify primal residuals."""
    if solver not in SOLVERS:
        raise ValueError(f"unknown solver '{solver}'; registered: {sorted(SOLVERS)}")
    if tol <= 0:
        raise ValueError("tol must be positive")
    return SOLVERS[solver](prog, tol, max_iter)


class OsqpSession:
    """Warm-started OSQP workspace for a sequence of structurally identical
    QPs (same shapes and sparsity patterns, changing values).

    Receding-horizon loops re-solve a program whose pattern never changes;
    re-using the workspace keeps the symbolic factorization and the previous
    solution as a warm start.
    """

    def __init__(self, prog: ConicProgram, tol: float = 1e-5, max_iter: int = 20000):
        import osqp

        self.tol = tol
        P, A, lower, upper = _osqp_parts(prog)
        self._pattern = (P.shape, A.shape, P.nnz, A.nnz,
                         A.indices.copy(), A.indptr.copy())
        self._solver = osqp.OSQP()
        self._solver.setup(P=P, q=prog.objective, A=A, l=lower, u=upper,
                           verbose=False, eps_abs=tol / 10.0, eps_rel=tol / 10.0,
                           max_iter=max_iter, polishing=False, warm_starting=True)

    def matches(self, prog: ConicProgram) -> bool:
        P, A, _, _ = _osqp_parts(prog)
        shape_ok = (P.shape, A.shape, P.nnz, A.nnz) == self._pattern[:4]
        return bool(shape_ok and np.array_equal(A.indices, self._pattern[4])
                    and np.array_equal(A.indptr, self._pattern[5]))

    def solve(self, prog: ConicProgram) -> Solution:
        P, A, lower, upper = _osqp_parts(prog)
        if (P.shape, A.shape, P.nnz, A.nnz) != self._pattern[:4]:
            raise ValueError("program structure changed; build a new session")
        t0 = time.perf_counter()
        self._solver.update(q=prog.objective, Ax=A.data, Px=P.data)
        self._solver.update(l=lower, u=upper)
        result = self._solver.solve(raise_error=False)
        elapsed = time.perf_counter() - t0
        return _finish_osqp(prog, result, self.tol, elapsed)


def dump_program(prog: ConicProgram, fh) -> None:
    """Write the program in a plain sparse-triplet text format.

    Sections are introduced by `# section <name> <rows> <cols>` lines and
    contain `i j value` triplets (zero-based). Vector sections use j = 0.
    Sections: objective, quad_objective (optional), eq, eq_rhs, ineq,
    ineq_lower, ineq_upper, then soc_<k>_{matrix,offset,lin,const}.
    """
    def vec(name, v):
        fh.write(f"# section {name} {len(v)} 1\n")
        for i, val in enumerate(np.asarray(v, dtype=float)):
            if np.isfinite(val) and val == 0.0:
                continue
            fh.write(f"{i} 0 {val!r}\n")

    def mat(name, m):
        coo = sp.coo_matrix(m)
        fh.write(f"# section {name} {coo.shape[0]} {coo.shape[1]}\n")
        for i, j, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{i} {j} {v!r}\n")

    fh.write(f"# conic program: {prog.num_vars} variables\n")
    vec("objective", prog.objective)
    if prog.quad_objective is not None:
        mat("quad_objective", prog.quad_objective)
    mat("eq", prog.eq_matrix)
    vec("eq_rhs", prog.eq_rhs)
    mat("ineq", prog.ineq_matrix)
    vec("ineq_lower", prog.ineq_lower)
    vec("ineq_upper", prog.ineq_upper)
    for k, blk in enumerate(prog.soc_blocks):
        mat(f"soc_{k}_matrix", blk.matrix)
        vec(f"soc_{k}_offset", blk.offset)
        vec(f"soc_{k}_lin", blk.lin)
        fh.write(f"# section soc_{k}_const 1 1\n0 0 {blk.const!r}\n")
