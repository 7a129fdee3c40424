"""Grid dynamic programming on the dual recursion for scalar multipliers.

Each stage value ``V_t(pi_{t-1})`` is tabulated on a grid over the box of
``pi_{t-1}``. The next-stage function enters the block problem through its
piecewise-linear interpolant, written as the minimum of its segment lines
with the multiplier restricted to the finite part of the grid.
"""
from dataclasses import dataclass
import csv

import numpy as np
import scipy.sparse as sp

from .lp import IncrementalLp, LpProblem, Status
from .model import dual_boxes

DEFAULT_NODES = 401


class StateNotScalar(ValueError):
    pass


class GridOutsideBox(ValueError):
    pass


class OutOfRange(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TabulatedValueFunction:
    """Values of ``V_t`` on a strictly increasing grid of ``pi_{t-1}``; ``-inf`` outside the domain."""

    stage: int
    grid: np.ndarray
    values: np.ndarray
    gamma: float = None

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        if g.ndim != 1 or g.size < 2 or np.any(np.diff(g) <= 0):
            raise ValueError("grid must be strictly increasing with at least two nodes")
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))

    def finite_range(self):
        ok = np.flatnonzero(np.isfinite(self.values))
        return (None, None) if ok.size == 0 else (int(ok[0]), int(ok[-1]))

    def segments(self):
        """Slopes and intercepts of the interpolant's segments on its finite part."""
        lo, hi = self.finite_range()
        if lo is None or lo == hi:
            return np.zeros(0), np.zeros(0)
        g, v = self.grid[lo:hi + 1], self.values[lo:hi + 1]
        slope = np.diff(v) / np.diff(g)
        return slope, v[:-1] - slope * g[:-1]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["pi", "value"])
            for x, y in zip(self.grid, self.values):
                w.writerow([repr(float(x)), repr(float(y))])


def evaluate_tabulated(fn, pi):
    """Linear interpolation of ``fn`` at ``pi``; ``-inf`` if a bracketing node is ``-inf``."""
    g = fn.grid
    tol = 1e-12 * max(1.0, abs(g[0]), abs(g[-1]))
    if pi < g[0] - tol or pi > g[-1] + tol:
        raise OutOfRange(f"{pi} outside [{g[0]}, {g[-1]}]")
    pi = min(max(pi, g[0]), g[-1])
    i = int(np.searchsorted(g, pi, side="right")) - 1
    i = min(i, g.size - 2)
    lo, hi = fn.values[i], fn.values[i + 1]
    if not (np.isfinite(lo) and np.isfinite(hi)):
        # an exact hit on a finite node is still finite
        if pi == g[i] and np.isfinite(lo):
            return float(lo)
        if pi == g[i + 1] and np.isfinite(hi):
            return float(hi)
        return -np.inf
    w = (pi - g[i]) / (g[i + 1] - g[i])
    return float((1 - w) * lo + w * hi)


@dataclass
class DualDpResult:
    functions: list
    first_stage_value: float
    first_stage_pi: float
    gamma: float = None


def check_scalar_instance(instance):
    """Raise unless every stage has one constraint row and fixed ``A`` and ``c`` before the last stage."""
    for t in range(instance.T):
        if instance.m(t) != 1:
            raise StateNotScalar(f"stage {t} has {instance.m(t)} dual variables")
    for t in range(instance.T - 1):
        if {"A", "c"} & instance.random_parts(t):
            raise ValueError(f"stage {t}: A and c must not vary")


def _grids(instance, boxes, grid_spec):
    grids = []
    for t in range(instance.T):
        lo, hi = float(boxes.lower[t][0]), float(boxes.upper[t][0])
        if isinstance(grid_spec, (int, np.integer)) or grid_spec is None:
            grids.append(np.linspace(lo, hi, int(grid_spec or DEFAULT_NODES)))
            continue
        g = np.asarray(grid_spec[t], dtype=float)
        tol = 1e-9 * max(1.0, abs(lo), abs(hi))
        if g[0] < lo - tol or g[-1] > hi + tol:
            raise GridOutsideBox(f"stage {t} grid [{g[0]}, {g[-1]}] leaves the box [{lo}, {hi}]")
        grids.append(g)
    return grids


def _stage_lp(instance, t, lower, upper, segments, gamma):
    """Block problem at stage ``t``; returns the model and the row index of the coupling rows."""
    reals = instance.stages[t]
    N = len(reals)
    p = instance.probs(t)
    last = t == instance.T - 1
    n_prev = instance.n(t - 1)
    n_pen = n_prev if gamma is not None else 0
    n_theta = 0 if last else N
    ncol = N + n_theta + n_pen
    cost = np.r_[p * np.array([r.b[0] for r in reals]), p if not last else [], -np.full(n_pen, gamma or 0.0)]
    lo = np.r_[np.full(N, lower), np.full(n_theta, -np.inf), np.zeros(n_pen)]
    hi = np.r_[np.full(N, upper), np.full(n_theta, np.inf), np.full(n_pen, np.inf)]
    rows = []
    rhs = []
    # coupling: sum_j p_j B_j' pi_j - slack <= c_prev - A_prev' pi_prev
    coup = np.zeros((n_prev, ncol))
    for j, r in enumerate(reals):
        coup[:, j] = p[j] * r.B[0]
    if n_pen:
        coup[:, N + n_theta:] = -np.eye(n_pen)
    rows.append(coup)
    rhs.append(np.zeros(n_prev))
    if last:
        for j, r in enumerate(reals):
            blk = np.zeros((r.A.shape[1], ncol))
            blk[:, j] = r.A[0]
            rows.append(blk)
            rhs.append(r.c)
    else:
        slope, icpt = segments
        for j in range(N):
            blk = np.zeros((slope.size, ncol))
            blk[:, j] = -slope
            blk[:, N + j] = 1.0
            rows.append(blk)
            rhs.append(icpt)
    mat = sp.csr_matrix(np.vstack(rows))
    prob = LpProblem(cost, mat, np.full(mat.shape[0], "<"), np.concatenate(rhs), lo, hi, sense="max")
    return IncrementalLp(prob), np.arange(n_prev)


def solve_dual_dp(instance, grid_spec=None, gamma=None, boxes=None):
    """Tabulate ``V_t`` (or its penalized version when ``gamma`` is set) backward.

    Parameters
    ----------
    grid_spec : int or list of arrays, optional
        Number of uniform nodes per stage box (default 401) or explicit grids
        per stage (the grid of stage ``t`` discretizes ``pi_t``).
    gamma : float, optional
        Penalty on slack in the coupling constraints.
    boxes : DualBox, optional
        Defaults to :func:`mspduals.model.dual_boxes`.

    Returns
    -------
    DualDpResult
        ``functions[t-1]`` tabulates ``V_t`` over the grid of ``pi_{t-1}``
        for ``t = 1..T-1``.
    """
    check_scalar_instance(instance)
    boxes = boxes or dual_boxes(instance)
    grids = _grids(instance, boxes, grid_spec)
    T = instance.T
    funcs = [None] * T
    for t in range(T - 1, 0, -1):
        nxt = funcs[t + 1] if t + 1 < T else None
        if nxt is None:
            lower, upper = grids[t][0], grids[t][-1]
            segs = None
        else:
            lo_i, hi_i = nxt.finite_range()
            if lo_i is None:
                funcs[t] = TabulatedValueFunction(t, grids[t - 1], np.full(grids[t - 1].size, -np.inf), gamma)
                continue
            lower, upper = nxt.grid[lo_i], nxt.grid[hi_i]
            segs = nxt.segments()
            if lo_i == hi_i:
                segs = (np.zeros(1), np.array([nxt.values[lo_i]]))
        lp, coup_rows = _stage_lp(instance, t, lower, upper, segs, gamma)
        A_prev = instance.stages[t - 1][0].A
        c_prev = instance.stages[t - 1][0].c
        vals = np.empty(grids[t - 1].size)
        for i, x in enumerate(grids[t - 1]):
            lp.set_row_bounds(coup_rows, -np.inf, c_prev - A_prev[0] * x)
            sol = lp.solve()
            if sol.status is Status.INFEASIBLE:
                vals[i] = -np.inf
            elif sol.optimal:
                vals[i] = sol.objective
            else:
                raise RuntimeError(f"stage {t} grid problem is {sol.status.value}")
        funcs[t] = TabulatedValueFunction(t, grids[t - 1], vals, gamma)

    # first stage: maximize b_0 pi_0 + V_1(pi_0) over the grid interpolant
    b0 = instance.stages[0][0].b[0]
    if T == 1:
        r = instance.stages[0][0]
        prob = LpProblem([b0], r.A.T, np.full(r.A.shape[1], "<"), r.c,
                         [grids[0][0]], [grids[0][-1]], sense="max")
        sol = IncrementalLp(prob).solve()
        return DualDpResult([], sol.objective, float(sol.primal[0]), gamma)
    f1 = funcs[1]
    vals = b0 * f1.grid + f1.values
    # concave objective: the maximum over the interpolant sits at a node
    k = int(np.argmax(np.where(np.isfinite(vals), vals, -np.inf)))
    return DualDpResult(funcs[1:], float(vals[k]), float(f1.grid[k]), gamma)
