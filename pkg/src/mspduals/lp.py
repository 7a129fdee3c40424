"""Linear programming with primal and dual solutions.

Every subproblem in the package goes through :func:`solve_lp` or, for
families of LPs that differ only in their right-hand sides and appended
rows, through :class:`IncrementalLp`.

Dual sign convention (both senses): ``reduced_costs = cost - A.T @ duals``
and, at optimality, ``objective = rhs @ duals + reduced_costs @ primal``.
For a minimization a ``<=`` row has a nonpositive dual; for a maximization
it is nonnegative.
"""
from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.sparse as sp
import highspy

from . import _simplex

INF = np.inf
TOL = 1e-9

_SENSES = ("<", "=", ">")


class MalformedProblem(ValueError):
    """Dimensions or bounds of an :class:`LpProblem` are inconsistent."""


class NumericalFailure(RuntimeError):
    """The solver gave up; perturb or rescale the problem and retry."""


class Status(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"


@dataclass(frozen=True, eq=False)
class LpProblem:
    """``min|max cost @ x  s.t.  matrix @ x (row_senses) rhs, lower <= x <= upper``."""

    cost: np.ndarray
    matrix: sp.csr_matrix
    row_senses: np.ndarray
    rhs: np.ndarray
    lower: np.ndarray = None
    upper: np.ndarray = None
    sense: str = "min"

    def __post_init__(self):
        cost = np.asarray(self.cost, dtype=float).ravel()
        n = cost.size
        mat = self.matrix
        if mat is None:
            mat = sp.csr_matrix((0, n))
        mat = sp.csr_matrix(mat, dtype=float)
        rhs = np.asarray(self.rhs, dtype=float).ravel()
        senses = np.asarray(self.row_senses, dtype="<U1").ravel()
        lower = np.zeros(n) if self.lower is None else np.asarray(self.lower, dtype=float).ravel()
        upper = np.full(n, INF) if self.upper is None else np.asarray(self.upper, dtype=float).ravel()
        if mat.shape[1] != n:
            raise MalformedProblem(f"matrix has {mat.shape[1]} columns, cost has {n}")
        if rhs.size != mat.shape[0] or senses.size != mat.shape[0]:
            raise MalformedProblem(
                f"matrix has {mat.shape[0]} rows, rhs {rhs.size}, senses {senses.size}"
            )
        if lower.size != n or upper.size != n:
            raise MalformedProblem("bound vectors must match the number of columns")
        if np.any(lower > upper):
            raise MalformedProblem("lower bound exceeds upper bound")
        if not np.all(np.isin(senses, _SENSES)):
            raise MalformedProblem(f"row senses must be among {_SENSES}")
        if self.sense not in ("min", "max"):
            raise MalformedProblem("sense must be 'min' or 'max'")
        if not (np.all(np.isfinite(cost)) and np.all(np.isfinite(rhs)) and np.all(np.isfinite(mat.data))):
            raise MalformedProblem("cost, rhs and matrix entries must be finite")
        for name, val in (("cost", cost), ("matrix", mat), ("row_senses", senses),
                          ("rhs", rhs), ("lower", lower), ("upper", upper)):
            object.__setattr__(self, name, val)

    @property
    def shape(self):
        return self.matrix.shape

    def row_bounds(self):
        lo = np.where(self.row_senses == "<", -INF, self.rhs)
        hi = np.where(self.row_senses == ">", INF, self.rhs)
        return lo, hi


@dataclass(frozen=True, eq=False)
class LpSolution:
    status: Status
    primal: np.ndarray = None
    duals: np.ndarray = None
    reduced_costs: np.ndarray = None
    objective: float = np.nan
    degenerate: bool = False

    @property
    def optimal(self):
        return self.status is Status.OPTIMAL


def solve_lp(problem, method="highs"):
    """Solve ``problem`` and return primal values, row duals and reduced costs.

    Parameters
    ----------
    problem : LpProblem
    method : {"highs", "simplex"}
        ``"highs"`` uses the HiGHS dual simplex; ``"simplex"`` the bundled
        dense bounded-variable revised simplex (small problems only).
    """
    if method == "highs":
        lp = IncrementalLp(problem)
        return lp.solve()
    if method == "simplex":
        return _solve_native(problem)
    raise ValueError(f"unknown method {method!r}")


# ---------------------------------------------------------------- HiGHS path


# generous: a healthy warm-started solve needs a few per row
SIMPLEX_ITERATIONS_PER_DIM = 50


def _new_highs():
    h = highspy.Highs()
    h.setOptionValue("output_flag", False)
    h.setOptionValue("presolve", "off")
    h.setOptionValue("solver", "simplex")
    h.setOptionValue("primal_feasibility_tolerance", TOL)
    h.setOptionValue("dual_feasibility_tolerance", TOL)
    h.setOptionValue("threads", 1)
    return h


def _finite(v):
    v = np.asarray(v, dtype=float)
    return np.where(np.isposinf(v), highspy.kHighsInf, np.where(np.isneginf(v), -highspy.kHighsInf, v))


class IncrementalLp:
    """A persistent HiGHS model for LP families sharing columns and costs.

    Right-hand sides can be replaced and rows appended between solves; each
    solve restarts from the previous optimal basis. Results are identical in
    meaning to :func:`solve_lp` on the equivalent :class:`LpProblem`.
    """

    def __init__(self, problem):
        self.sense = problem.sense
        self._sign = -1.0 if problem.sense == "max" else 1.0
        self.cost = problem.cost.copy()
        self.lower = problem.lower.copy()
        self.upper = problem.upper.copy()
        self.n = problem.cost.size
        lo, hi = problem.row_bounds()
        self.row_lo = list(lo)
        self.row_hi = list(hi)
        self._rows = [problem.matrix]
        self._h = _new_highs()
        lp = highspy.HighsLp()
        csc = sp.csc_matrix(problem.matrix)
        lp.num_col_ = self.n
        lp.num_row_ = csc.shape[0]
        lp.col_cost_ = self._sign * self.cost
        lp.col_lower_ = _finite(self.lower)
        lp.col_upper_ = _finite(self.upper)
        lp.row_lower_ = _finite(lo)
        lp.row_upper_ = _finite(hi)
        lp.a_matrix_.format_ = highspy.MatrixFormat.kColwise
        lp.a_matrix_.start_ = csc.indptr.astype(np.int32)
        lp.a_matrix_.index_ = csc.indices.astype(np.int32)
        lp.a_matrix_.value_ = csc.data
        self._h.passModel(lp)

    @property
    def num_rows(self):
        return len(self.row_lo)

    def matrix(self):
        return sp.vstack(self._rows, format="csr") if len(self._rows) > 1 else sp.csr_matrix(self._rows[0])

    def add_rows(self, rows, lower, upper):
        rows = sp.csr_matrix(np.atleast_2d(rows) if not sp.issparse(rows) else rows, dtype=float)
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        if rows.shape[1] != self.n or rows.shape[0] != lower.size:
            raise MalformedProblem("appended rows do not match the model")
        self._h.addRows(rows.shape[0], _finite(lower), _finite(upper), rows.nnz,
                        rows.indptr[:-1].astype(np.int32), rows.indices.astype(np.int32), rows.data)
        self._rows.append(rows)
        self.row_lo.extend(lower)
        self.row_hi.extend(upper)

    def set_row_bounds(self, index, lower, upper):
        index = np.asarray(index, dtype=np.int32)
        lower = np.broadcast_to(np.asarray(lower, dtype=float), index.shape)
        upper = np.broadcast_to(np.asarray(upper, dtype=float), index.shape)
        self._h.changeRowsBounds(index.size, index, _finite(lower), _finite(upper))
        for i, lo, hi in zip(index, lower, upper):
            self.row_lo[i] = lo
            self.row_hi[i] = hi

    def set_col_bounds(self, index, lower, upper):
        index = np.asarray(index, dtype=np.int32)
        lower = np.broadcast_to(np.asarray(lower, dtype=float), index.shape).copy()
        upper = np.broadcast_to(np.asarray(upper, dtype=float), index.shape).copy()
        self._h.changeColsBounds(index.size, index, _finite(lower), _finite(upper))
        self.lower[index] = lower
        self.upper[index] = upper

    def set_costs(self, index, values):
        index = np.asarray(index, dtype=np.int32)
        values = np.broadcast_to(np.asarray(values, dtype=float), index.shape).copy()
        self._h.changeColsCost(index.size, index, self._sign * values)
        self.cost[index] = values

    def solve(self):
        h = self._h
        # warm starts can cycle on degenerate bases; a cap hands those to the cold runs
        limit = SIMPLEX_ITERATIONS_PER_DIM * (self.n + self.num_rows) + 1000
        h.setOptionValue("simplex_iteration_limit", limit)
        h.run()
        status = h.getModelStatus()
        if status != highspy.HighsModelStatus.kOptimal:
            # the warm-started dual simplex occasionally misreports badly scaled
            # models; a cold primal simplex run on a copy has the last word
            for option, value in (("simplex_strategy", 4), ("solver", "ipm")):
                h = _new_highs()
                h.setOptionValue("simplex_iteration_limit", limit)
                h.setOptionValue(option, value)
                h.passModel(self._h.getLp())
                h.run()
                status = h.getModelStatus()
                if status == highspy.HighsModelStatus.kOptimal:
                    break
            if status == highspy.HighsModelStatus.kUnboundedOrInfeasible:
                status = self._disambiguate()
            if status == highspy.HighsModelStatus.kInfeasible:
                return LpSolution(Status.INFEASIBLE)
            if status == highspy.HighsModelStatus.kUnbounded:
                return LpSolution(Status.UNBOUNDED)
            if status != highspy.HighsModelStatus.kOptimal:
                raise NumericalFailure(f"HiGHS returned {h.modelStatusToString(status)}")
            self._h.setBasis(h.getBasis())
        sol = h.getSolution()
        x = np.array(sol.col_value)
        y = self._sign * np.array(sol.row_dual)
        d = self._sign * np.array(sol.col_dual)
        obj = float(self.cost @ x)
        return LpSolution(Status.OPTIMAL, x, y, d, obj, self._degenerate(h, x, d))

    def _disambiguate(self):
        # zero objective: feasible iff the original was unbounded
        h = _new_highs()
        lp = self._h.getLp()
        lp.col_cost_ = np.zeros(self.n)
        h.passModel(lp)
        h.run()
        if h.getModelStatus() == highspy.HighsModelStatus.kOptimal:
            return highspy.HighsModelStatus.kUnbounded
        return highspy.HighsModelStatus.kInfeasible

    def _degenerate(self, h, x, d):
        basis = h.getBasis()
        col_basic = np.array([s == highspy.HighsBasisStatus.kBasic for s in basis.col_status])
        at_bound = (np.abs(x - self.lower) <= TOL) | (np.abs(x - self.upper) <= TOL)
        if np.any(col_basic & at_bound):
            return True
        free_nonbasic = ~col_basic & (np.abs(d) <= TOL) & (self.upper > self.lower)
        return bool(np.any(free_nonbasic))


# ---------------------------------------------------------------- native path


def _equilibrate(A):
    A = np.abs(A)
    r = A.max(axis=1, initial=0.0)
    r[r == 0] = 1.0
    c = (A / r[:, None]).max(axis=0, initial=0.0)
    c[c == 0] = 1.0
    return 1.0 / r, 1.0 / c


def _solve_native(problem):
    A = problem.matrix.toarray()
    m, n = A.shape
    sign = -1.0 if problem.sense == "max" else 1.0
    c = sign * problem.cost
    rs, cs = _equilibrate(A) if A.size else (np.ones(m), np.ones(n))
    As = A * rs[:, None] * cs[None, :]
    bs = problem.rhs * rs
    cs_cost = c * cs
    lo = problem.lower / cs
    hi = problem.upper / cs

    # variable substitution to 0 <= z <= u
    cols, shift, u, zc, colmap = [], np.zeros(m), [], [], []
    for j in range(n):
        a = As[:, j]
        if np.isfinite(lo[j]):
            cols.append(a); u.append(hi[j] - lo[j]); zc.append(cs_cost[j])
            shift += a * lo[j]; colmap.append((j, 1.0, lo[j]))
        elif np.isfinite(hi[j]):
            cols.append(-a); u.append(np.inf); zc.append(-cs_cost[j])
            shift += a * hi[j]; colmap.append((j, -1.0, hi[j]))
        else:
            cols.append(a); u.append(np.inf); zc.append(cs_cost[j]); colmap.append((j, 1.0, 0.0))
            cols.append(-a); u.append(np.inf); zc.append(-cs_cost[j]); colmap.append((j, -1.0, 0.0))
    for i, s in enumerate(problem.row_senses):
        if s == "=":
            continue
        e = np.zeros(m)
        e[i] = 1.0 if s == "<" else -1.0
        cols.append(e); u.append(np.inf); zc.append(0.0); colmap.append((None, 0.0, 0.0))
    M = np.column_stack(cols) if cols else np.zeros((m, 0))
    try:
        status, z, y = _simplex.solve_standard(M, bs - shift, np.array(zc), np.array(u, dtype=float))
    except _simplex.SimplexFailure as exc:
        raise NumericalFailure(str(exc)) from exc
    if status == "infeasible":
        return LpSolution(Status.INFEASIBLE)
    if status == "unbounded":
        return LpSolution(Status.UNBOUNDED)
    xs = np.zeros(n)
    for k, (j, s, off) in enumerate(colmap):
        if j is None:
            continue
        if s == 1.0 and off == 0.0 and not np.isfinite(lo[j]) and not np.isfinite(hi[j]):
            xs[j] += z[k]
        elif s == -1.0 and off == 0.0 and not np.isfinite(lo[j]) and not np.isfinite(hi[j]):
            xs[j] -= z[k]
        else:
            xs[j] = off + s * z[k]
    x = xs * cs
    y = sign * y * rs
    d = problem.cost - problem.matrix.T @ y
    obj = float(problem.cost @ x)
    basic_like = (np.abs(x - problem.lower) > TOL) & (np.abs(x - problem.upper) > TOL)
    degenerate = bool(np.any(~basic_like & (np.abs(d) <= TOL) & (problem.upper > problem.lower)))
    return LpSolution(Status.OPTIMAL, x, y, d, obj, degenerate)


def duality_gap(problem, solution):
    """``|objective - rhs@duals - reduced_costs@primal|`` of an optimal solution."""
    return abs(solution.objective - problem.rhs @ solution.duals - solution.reduced_costs @ solution.primal)
