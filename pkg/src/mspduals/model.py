"""Stagewise-independent multistage stochastic linear programs.

An instance with stages ``t = 0..T-1`` (stage 0 deterministic) encodes

    min E[ sum_t c_t' x_t ]   s.t.  B_t x_{t-1} + A_t x_t = b_t,  x_t >= 0,

with ``(A_t, B_t, c_t, b_t)`` drawn from a finite list of realizations at
every stage, independently across stages. Stage indices are zero-based
throughout the package.
"""
from dataclasses import dataclass
import warnings

import numpy as np
import scipy.sparse as sp

from .lp import LpProblem, Status, solve_lp

PROB_TOL = 1e-12
DEFAULT_NODE_CAP = 10**6
RHO_FLOOR = 1e-6
_PARTS = ("A", "B", "c", "b")


class TreeTooLarge(RuntimeError):
    """The scenario tree exceeds the node cap; use SDDP instead."""


class NotStrictlyFeasible(ValueError):
    pass


class NoLowerBound(RuntimeError):
    pass


class InfeasibleInstance(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class StageRealization:
    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    b: np.ndarray
    p: float = 1.0

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        B = np.asarray(self.B, dtype=float) if self.B is not None else np.zeros((b.size, 0))
        if B.ndim < 2:
            B = B.reshape(b.size, -1)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "c", np.atleast_1d(np.asarray(self.c, dtype=float)))
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "p", float(self.p))


@dataclass(frozen=True, eq=False)
class MslpInstance:
    """Finite-support, stagewise-independent MSLP.

    ``stages[t]`` lists the realizations of stage ``t``. ``declared_random``
    optionally states, per stage, which of ``"A", "B", "c", "b"`` may vary
    across realizations; :func:`validate_instance` checks the data against it.
    """

    stages: tuple
    declared_random: tuple = None
    name: str = ""

    def __post_init__(self):
        stages = tuple(tuple(r if isinstance(r, StageRealization) else StageRealization(**r) for r in st)
                       for st in self.stages)
        object.__setattr__(self, "stages", stages)
        if self.declared_random is not None:
            object.__setattr__(self, "declared_random",
                               tuple(frozenset(f) for f in self.declared_random))

    @property
    def T(self):
        return len(self.stages)

    def n(self, t):
        return self.stages[t][0].A.shape[1]

    def m(self, t):
        return self.stages[t][0].A.shape[0]

    def N(self, t):
        return len(self.stages[t])

    def probs(self, t):
        return np.array([r.p for r in self.stages[t]])

    def random_parts(self, t):
        """Names of the data blocks that actually differ across realizations of stage ``t``."""
        first = self.stages[t][0]
        out = set()
        for r in self.stages[t][1:]:
            for name in _PARTS:
                a, b = getattr(first, name), getattr(r, name)
                if a.shape != b.shape or not np.array_equal(a, b):
                    out.add(name)
        return frozenset(out)

    def tree_size(self):
        total, width = 0, 1
        for t in range(self.T):
            width *= self.N(t)
            total += width
        return total

    def expected_value_instance(self):
        """Single-scenario instance with probability-weighted mean data."""
        stages = []
        for t in range(self.T):
            p = self.probs(t)
            avg = {name: sum(pi * getattr(r, name) for pi, r in zip(p, self.stages[t])) for name in _PARTS}
            stages.append((StageRealization(p=1.0, **avg),))
        return MslpInstance(tuple(stages), name=f"{self.name}-ev")


@dataclass(frozen=True)
class Violation:
    stage: int
    realization: object
    rule: str
    message: str


def validate_instance(instance):
    """List every broken invariant of ``instance``; empty when well formed."""
    out = []
    T = instance.T
    if T < 1:
        return [Violation(None, None, "horizon", "instance has no stages")]
    if instance.N(0) != 1:
        out.append(Violation(0, None, "deterministic-first-stage",
                             f"stage 0 has {instance.N(0)} realizations, expected 1"))
    elif abs(instance.stages[0][0].p - 1.0) > PROB_TOL:
        out.append(Violation(0, 0, "probability", "stage 0 realization must have p=1"))
    for t in range(T):
        reals = instance.stages[t]
        if not reals:
            out.append(Violation(t, None, "realizations", "stage has no realizations"))
            continue
        n_t, m_t = reals[0].A.shape[1], reals[0].A.shape[0]
        n_prev = instance.n(t - 1) if t > 0 else 0
        for j, r in enumerate(reals):
            if not 0.0 < r.p <= 1.0:
                out.append(Violation(t, j, "probability", f"p={r.p} outside (0, 1]"))
            if r.A.shape != (m_t, n_t):
                out.append(Violation(t, j, "dimension", f"A has shape {r.A.shape}, expected {(m_t, n_t)}"))
            if r.B.shape != (m_t, n_prev):
                out.append(Violation(t, j, "dimension", f"B has shape {r.B.shape}, expected {(m_t, n_prev)}"))
            if r.c.shape != (n_t,):
                out.append(Violation(t, j, "dimension", f"c has length {r.c.size}, expected {n_t}"))
            if r.b.shape != (m_t,):
                out.append(Violation(t, j, "dimension", f"b has length {r.b.size}, expected {m_t}"))
        total = sum(r.p for r in reals)
        if abs(total - 1.0) > PROB_TOL:
            out.append(Violation(t, None, "probability-sum",
                                 f"stage {t} probabilities sum to {total!r}"))
        if instance.declared_random is not None and t < len(instance.declared_random):
            extra = instance.random_parts(t) - instance.declared_random[t]
            if extra:
                out.append(Violation(t, None, "randomness-flags",
                                     f"{sorted(extra)} vary across realizations but are declared fixed"))
    return out


# ------------------------------------------------------- deterministic equivalent


@dataclass(frozen=True, eq=False)
class NodeIndex:
    """Map between scenario-tree nodes and deterministic-equivalent rows/columns."""

    stage: np.ndarray
    realization: np.ndarray
    parent: np.ndarray
    prob: np.ndarray
    col_start: np.ndarray
    row_start: np.ndarray
    n_cols: np.ndarray
    n_rows: np.ndarray

    def __len__(self):
        return self.stage.size

    def cols(self, node):
        return slice(self.col_start[node], self.col_start[node] + self.n_cols[node])

    def rows(self, node):
        return slice(self.row_start[node], self.row_start[node] + self.n_rows[node])

    def nodes_at(self, t):
        return np.flatnonzero(self.stage == t)

    def path(self, node):
        """Realization indices from stage 0 to ``node``."""
        out = []
        while node >= 0:
            out.append(int(self.realization[node]))
            node = self.parent[node]
        return out[::-1]

    def node_duals(self, duals):
        """Per-node multipliers of the (unweighted) dual problem, ``y_n / p_n``."""
        return [duals[self.rows(k)] / self.prob[k] for k in range(len(self))]

    def node_values(self, primal):
        return [primal[self.cols(k)] for k in range(len(self))]


def enumerate_tree(instance, node_cap=DEFAULT_NODE_CAP):
    size = instance.tree_size()
    if size > node_cap:
        raise TreeTooLarge(f"scenario tree has {size} nodes (cap {node_cap})")
    stage, real, parent, prob = [0], [0], [-1], [1.0]
    frontier = [0]
    for t in range(1, instance.T):
        p = instance.probs(t)
        nxt = []
        for par in frontier:
            for j in range(instance.N(t)):
                stage.append(t)
                real.append(j)
                parent.append(par)
                prob.append(prob[par] * p[j])
                nxt.append(len(stage) - 1)
        frontier = nxt
    stage = np.array(stage)
    n_cols = np.array([instance.n(t) for t in stage])
    n_rows = np.array([instance.m(t) for t in stage])
    return NodeIndex(stage, np.array(real), np.array(parent), np.array(prob),
                     np.concatenate([[0], np.cumsum(n_cols)[:-1]]),
                     np.concatenate([[0], np.cumsum(n_rows)[:-1]]), n_cols, n_rows)


def build_deterministic_equivalent(instance, node_cap=DEFAULT_NODE_CAP, cost_override=None):
    """Extensive-form LP over the full scenario tree.

    ``cost_override``, if given, maps a node id to the cost vector used at
    that node (path-dependent costs); otherwise the realization's ``c``.
    Returns ``(LpProblem, NodeIndex)``.
    """
    idx = enumerate_tree(instance, node_cap)
    rows, cols, vals = [], [], []
    cost = np.zeros(int(idx.n_cols.sum()))
    rhs = np.zeros(int(idx.n_rows.sum()))
    for k in range(len(idx)):
        t, j = idx.stage[k], idx.realization[k]
        r = instance.stages[t][j]
        r0, c0 = idx.row_start[k], idx.col_start[k]
        c_node = r.c if cost_override is None else cost_override(k)
        cost[idx.cols(k)] = idx.prob[k] * np.asarray(c_node)
        rhs[idx.rows(k)] = r.b
        A = sp.coo_matrix(r.A)
        rows.append(A.row + r0); cols.append(A.col + c0); vals.append(A.data)
        if idx.parent[k] >= 0 and r.B.size:
            B = sp.coo_matrix(r.B)
            rows.append(B.row + r0); cols.append(B.col + idx.col_start[idx.parent[k]]); vals.append(B.data)
    mat = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(rhs.size, cost.size))
    return LpProblem(cost, mat, np.full(rhs.size, "="), rhs), idx


def solve_deterministic_equivalent(instance, node_cap=DEFAULT_NODE_CAP, cost_override=None):
    """Solve the extensive form; returns ``(value, solution, NodeIndex)``."""
    prob, idx = build_deterministic_equivalent(instance, node_cap, cost_override)
    sol = solve_lp(prob)
    if sol.status is not Status.OPTIMAL:
        raise InfeasibleInstance(f"deterministic equivalent is {sol.status.value}")
    return sol.objective, sol, idx


# ----------------------------------------------------------------- dual boxes


@dataclass(frozen=True, eq=False)
class DualBox:
    """Per-stage bounds ``lower[t] <= pi_t <= upper[t]`` on dual multipliers."""

    lower: tuple
    upper: tuple
    validated: bool = False

    def __post_init__(self):
        lo = tuple(np.asarray(v, dtype=float) for v in self.lower)
        hi = tuple(np.asarray(v, dtype=float) for v in self.upper)
        if any(np.any(a > b) for a, b in zip(lo, hi)):
            raise ValueError("box lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def T(self):
        return len(self.lower)

    def radius(self, t):
        return float(np.max(np.maximum(np.abs(self.lower[t]), np.abs(self.upper[t])), initial=0.0))

    def is_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.lower + self.upper)

    def contains(self, t, pi, tol=1e-9):
        pi = np.asarray(pi)
        return bool(np.all(pi >= self.lower[t] - tol) and np.all(pi <= self.upper[t] + tol))

    def inflate(self, factor):
        """Scale every half-width by ``factor`` about the box centre."""
        lo, hi = [], []
        for a, b in zip(self.lower, self.upper):
            mid, half = (a + b) / 2, (b - a) / 2
            lo.append(mid - factor * half)
            hi.append(mid + factor * half)
        return DualBox(tuple(lo), tuple(hi), self.validated)

    def intersect(self, other):
        return DualBox(tuple(np.maximum(a, b) for a, b in zip(self.lower, other.lower)),
                       tuple(np.minimum(a, b) for a, b in zip(self.upper, other.upper)),
                       self.validated or other.validated)

    def to_dict(self):
        # json has no infinity literal, so unbounded sides are written as null
        enc = lambda v: [None if not np.isfinite(x) else float(x) for x in v]
        return {"lower": [enc(v) for v in self.lower], "upper": [enc(v) for v in self.upper],
                "validated": self.validated}

    @classmethod
    def from_dict(cls, data):
        def dec(vs, fill):
            return tuple(np.array([fill if x is None else x for x in v], dtype=float) for v in vs)
        try:
            return cls(dec(data["lower"], -np.inf), dec(data["upper"], np.inf), bool(data.get("validated", False)))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"bad dual box record: {exc}") from exc


def find_strictly_feasible_point(instance, node_cap=DEFAULT_NODE_CAP, cap=1.0):
    """Deterministic-equivalent point maximizing its smallest component (capped at ``cap``)."""
    prob, idx = build_deterministic_equivalent(instance, node_cap)
    n = prob.cost.size
    # variables (x, tau): max tau s.t. A x = b, x - tau >= 0
    mat = sp.vstack([sp.hstack([prob.matrix, sp.csr_matrix((prob.shape[0], 1))]),
                     sp.hstack([sp.eye(n), -np.ones((n, 1))])])
    lp = LpProblem(np.r_[np.zeros(n), 1.0], mat, np.r_[prob.row_senses, np.full(n, ">")],
                   np.r_[prob.rhs, np.zeros(n)], upper=np.r_[np.full(n, np.inf), cap], sense="max")
    sol = solve_lp(lp)
    if sol.status is not Status.OPTIMAL or sol.primal[-1] <= 0:
        raise NotStrictlyFeasible("no feasible point with all components positive")
    return sol.primal[:n], idx


def compute_dual_boxes(instance, strictly_feasible_point=None, radius=None, lower_bound=None,
                       node_cap=10**4, check=True):
    """Symmetric per-stage boxes containing an optimal dual solution.

    Half-width at stage ``t`` is the largest over its nodes ``m`` of
    ``(E[c'x_hat] - lower_bound + r * sum_t E||c_t||) / (p_m * rho_m)`` where
    ``rho_m = max(r * sigma_min(B_m | A_m), 1e-6)`` and ``p_m`` the node
    probability. Dividing by ``p_m`` turns the bound on multipliers of the
    deterministic equivalent into one on per-realization multipliers.

    Parameters
    ----------
    strictly_feasible_point : array, optional
        Deterministic-equivalent column vector with every entry ``>= radius``.
        Searched by a phase-1 LP when omitted.
    radius : float, optional
        Ball radius ``r``; defaults to the smallest component of the point.
    lower_bound : float, optional
        Any valid lower bound on the optimal value; defaults to the
        deterministic-equivalent optimum.
    check : bool
        Verify on the deterministic equivalent that its node duals lie in the
        box; sets ``validated``.
    """
    prob, idx = build_deterministic_equivalent(instance, node_cap)
    if strictly_feasible_point is None:
        x_hat, _ = find_strictly_feasible_point(instance, node_cap)
    else:
        x_hat = np.asarray(strictly_feasible_point, dtype=float)
        if x_hat.size != prob.cost.size:
            raise ValueError("strictly feasible point does not match the deterministic equivalent")
        resid = np.abs(prob.matrix @ x_hat - prob.rhs).max(initial=0.0)
        if resid > 1e-7 * (1 + np.abs(prob.rhs).max(initial=0.0)):
            raise NotStrictlyFeasible(f"point violates the constraints by {resid:.3g}")
    r = float(x_hat.min()) if radius is None else float(radius)
    if r <= 0 or np.any(x_hat < r - 1e-12):
        raise NotStrictlyFeasible(f"some component is below the radius r={r}")
    sol = None
    if lower_bound is None:
        sol = solve_lp(prob)
        if sol.status is not Status.OPTIMAL:
            raise NoLowerBound(f"deterministic equivalent is {sol.status.value}")
        lower_bound = sol.objective
    cost_norm = sum(idx.prob[k] * np.linalg.norm(instance.stages[idx.stage[k]][idx.realization[k]].c)
                    for k in range(len(idx)))
    numer = float(prob.cost @ x_hat) - lower_bound + r * cost_norm
    numer = max(numer, 0.0)

    # max over nodes of 1 / (p_m rho_m): only the realization and the smallest path probability matter
    sig = []
    for t in range(instance.T):
        vals = []
        for r_ in instance.stages[t]:
            M = np.hstack([r_.B, r_.A])
            s = np.linalg.svd(M, compute_uv=False)
            s = s[s > 1e-12 * max(1.0, s.max(initial=0.0))]
            vals.append(s.min() if s.size else 0.0)
        sig.append(np.array(vals))
    lo, hi = [], []
    min_path = 1.0
    for t in range(instance.T):
        p = instance.probs(t)
        rho = np.maximum(r * sig[t], RHO_FLOOR)
        half = numer / (min_path * np.min(p * rho))
        min_path *= p.min()
        lo.append(np.full(instance.m(t), -half))
        hi.append(np.full(instance.m(t), half))
    box = DualBox(tuple(lo), tuple(hi))
    if not check:
        return box
    if sol is None:
        sol = solve_lp(prob)
    ok = dual_box_contains_node_duals(box, sol.duals, idx)
    if not ok:
        warnings.warn("dual box does not contain the deterministic-equivalent node duals", RuntimeWarning)
    return DualBox(box.lower, box.upper, validated=ok)


def dual_box_contains_node_duals(box, duals, idx, tol=1e-7):
    for k, pi in enumerate(idx.node_duals(duals)):
        t = idx.stage[k]
        scale = tol * (1 + np.abs(pi).max(initial=0.0))
        if not box.contains(t, pi, scale):
            return False
    return True


def _implied_coupling(instance, t, box):
    """Upper bound on ``-E[B_{t+1}' pi_{t+1}]`` componentwise over the stage t+1 box."""
    n = instance.n(t)
    if t + 1 >= instance.T:
        return np.zeros(n)
    lo, hi = box[0][t + 1], box[1][t + 1]
    out = np.zeros(n)
    for p, r in zip(instance.probs(t + 1), instance.stages[t + 1]):
        Bt = -r.B.T  # (n_t, m_{t+1})
        with np.errstate(invalid="ignore"):
            a = np.where(Bt > 0, Bt * hi, np.where(Bt < 0, Bt * lo, 0.0))
        out += p * a.sum(axis=1)
    return out


def propagate_dual_boxes(instance):
    """Bounds implied by dual feasibility alone, valid for every feasible dual policy.

    Backward over stages: ``pi_t`` must satisfy
    ``A_t' pi_t <= c_t - E[B_{t+1}' pi_{t+1}]``; the right-hand side is
    relaxed with the box already found for stage ``t+1`` and the polyhedron's
    bounding box is computed by LP. Unbounded directions give infinite bounds.
    """
    T = instance.T
    lo = [None] * T
    hi = [None] * T
    for t in range(T - 1, -1, -1):
        slack = _implied_coupling(instance, t, (lo, hi))
        m = instance.m(t)
        lo_t, hi_t = np.full(m, np.inf), np.full(m, -np.inf)
        for r in instance.stages[t]:
            cap = r.c + slack
            keep = np.isfinite(cap)
            G = r.A.T[keep]
            h = cap[keep]
            for i in range(m):
                for sense in ("max", "min"):
                    e = np.zeros(m)
                    e[i] = 1.0
                    lp = LpProblem(e, G, np.full(h.size, "<"), h,
                                   lower=np.full(m, -np.inf), upper=np.full(m, np.inf), sense=sense)
                    sol = solve_lp(lp)
                    if sol.status is Status.INFEASIBLE:
                        raise InfeasibleInstance(f"dual constraints at stage {t} are infeasible")
                    if sense == "max":
                        hi_t[i] = max(hi_t[i], sol.objective if sol.optimal else np.inf)
                    else:
                        lo_t[i] = min(lo_t[i], sol.objective if sol.optimal else -np.inf)
        lo[t], hi[t] = lo_t, hi_t
    return DualBox(tuple(lo), tuple(hi), validated=True)


def dual_boxes(instance, node_cap=10**4, **kwargs):
    """Tightest available valid boxes: implied bounds, with the strict-feasibility
    bound filling any unbounded direction."""
    implied = propagate_dual_boxes(instance)
    if implied.is_finite():
        return implied
    strict = compute_dual_boxes(instance, node_cap=node_cap, **kwargs)
    return implied.intersect(strict)
