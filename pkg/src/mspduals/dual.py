"""SDDP on the dual dynamic-programming recursion.

The dual of the MSLP is

    max E[ sum_t b_t' pi_t ]
    s.t. A_{T-1}' pi_{T-1} <= c_{T-1},
         A_{t-1}' pi_{t-1} + E[ B_t' pi_t ] <= c_{t-1},

and decomposes backward into concave value functions of the previous
multiplier. Stage ``t`` at state ``pi_{t-1}`` solves one block problem over
all realizations jointly,

    V_t(pi_{t-1}) = max sum_j p_j (b_tj' pi_tj + V_{t+1}(pi_tj))
                    s.t. sum_j p_j B_tj' pi_tj <= c_{t-1} - A_{t-1}' pi_{t-1},

so the cut models here are upper bounds and the first-stage value of the
model is a deterministic upper bound on the optimal value.

Every variant is written in one form: the block problem's constraint rows
have right-hand side ``h0 + H @ s`` for the state ``s``, and the next state
of block ``j`` is ``P_j pi_j + q0_j + Q_j s``. Then cuts are read from the
row multipliers ``lam`` as ``gradient = H' lam``.
"""
from dataclasses import dataclass, field
import csv
import json
import math

import numpy as np
import scipy.sparse as sp

from .cuts import Cut, PolicyApprox
from .lp import IncrementalLp, LpProblem, Status, solve_lp
from .model import dual_boxes
from .primal import realization_groups, MultiplierTrajectories

DEFAULT_CAP = 1e10
# violations this small are solver noise at a boundary state; absolute, since
# the box rows carry large right-hand sides that would swamp a relative test
TIGHT_VIOLATION = 1e-8


class RootInfeasible(RuntimeError):
    """Feasibility cuts leave no admissible first-stage multiplier."""


class DualSolveError(RuntimeError):
    pass


# ----------------------------------------------------------------- penalties


@dataclass(frozen=True)
class PenaltySchedule:
    """Penalty ``min(cap, gamma0 * alpha**(k-1))`` at iteration ``k``."""

    gamma0: float
    alpha: float = 1.0
    cap: float = DEFAULT_CAP

    def __post_init__(self):
        if self.gamma0 <= 0 or self.alpha < 1 or self.cap <= 0:
            raise ValueError("need gamma0 > 0, alpha >= 1 and cap > 0")


def penalty_value(schedule, k, dim=None):
    """Penalty coefficient at iteration ``k`` (1-based), optionally as a vector."""
    if k < 1:
        raise ValueError("iterations are counted from 1")
    if schedule.alpha == 1.0:
        v = min(schedule.cap, schedule.gamma0)
    else:
        # compare in logs so huge k does not overflow
        log_v = math.log(schedule.gamma0) + (k - 1) * math.log(schedule.alpha)
        if log_v >= math.log(schedule.cap):
            v = schedule.cap
        else:
            v = min(schedule.cap, schedule.gamma0 * schedule.alpha ** (k - 1))
    return v if dim is None else np.full(dim, v)


# ------------------------------------------------------------- stage specs


@dataclass(eq=False)
class StageSpec:
    """Block problem of one stage in state-affine form.

    Blocks ``j = 0..N-1`` carry multipliers ``pi_j`` of size ``m``.
    ``coupling`` is ``(G, h0, H)`` with ``G`` acting on all stacked ``pi``;
    ``own[j]`` is ``(M_j, h0_j, H_j)`` acting on ``pi_j`` alone (last stage);
    ``next[j]`` is ``(P_j, q0_j, Q_j, key_j)`` (stages with a successor).
    """

    t: int
    key: object
    m: int
    p: np.ndarray
    obj: np.ndarray
    state_dim: int
    lower: np.ndarray
    upper: np.ndarray
    coupling: tuple = None
    own: list = None
    next: list = None

    @property
    def N(self):
        return self.p.size


class DualModel:
    """Dual recursion of a plain instance: ``A`` and ``c`` fixed at every stage with a successor."""

    def __init__(self, instance, boxes):
        self.instance = instance
        self.boxes = boxes
        self.T = instance.T
        self._check()

    def _check(self):
        for t in range(self.T - 1):
            bad = {"A", "c"} & self.instance.random_parts(t)
            if bad:
                raise ValueError(f"stage {t}: {sorted(bad)} vary; use the all-random variant")

    def keys(self, t):
        return [0]

    def prev_data(self, t, key):
        r = self.instance.stages[t - 1][0]
        return r.A, r.c

    def next_key(self, t, j):
        return 0

    def state_dim(self, t):
        return 0 if t == 0 else self.instance.m(t - 1)

    def stage(self, t, key):
        inst, T = self.instance, self.T
        reals = inst.stages[t]
        m = inst.m(t)
        d = self.state_dim(t)
        p = inst.probs(t)
        spec = StageSpec(t, key, m, p, np.array([r.b for r in reals]), d,
                         self.boxes.lower[t], self.boxes.upper[t])
        if t > 0:
            A_prev, c_prev = self.prev_data(t, key)
            G = sp.hstack([sp.csr_matrix(pj * r.B.T) for pj, r in zip(p, reals)], format="csr")
            spec.coupling = self.coupling(t, key, G, A_prev, c_prev)
        if t == T - 1:
            spec.own = [self.own_rows(t, j, r) for j, r in enumerate(reals)]
        else:
            spec.next = [self.next_map(t, j) for j in range(len(reals))]
        return spec

    def coupling(self, t, key, G, A_prev, c_prev):
        return G, c_prev.copy(), -A_prev.T

    def own_rows(self, t, j, r):
        return r.A.T, r.c.copy(), np.zeros((r.c.size, self.state_dim(t)))

    def next_map(self, t, j):
        m = self.instance.m(t)
        d = self.state_dim(t)
        return np.eye(m), np.zeros(m), np.zeros((m, d)), self.next_key(t, j)

    def stage_objective_bound(self, t):
        """Largest ``|b_tj' pi|`` over realizations and the stage box."""
        rad = np.maximum(np.abs(self.boxes.lower[t]), np.abs(self.boxes.upper[t]))
        return max(float(np.abs(r.b) @ rad) for r in self.instance.stages[t])


class AllRandomDualModel(DualModel):
    """Dual recursion when ``A`` and ``c`` may vary: value functions are indexed
    by the previous stage's realization (grouped by identical ``A`` and ``c``)."""

    def _check(self):
        self._groups = [realization_groups(self.instance, t) for t in range(self.T)]

    def keys(self, t):
        return [0] if t == 0 else sorted(set(self._groups[t - 1]))

    def prev_data(self, t, key):
        r = self.instance.stages[t - 1][key]
        return r.A, r.c

    def next_key(self, t, j):
        return self._groups[t][j]


class InterstageCostDualModel(DualModel):
    """Dual recursion with autoregressive costs; the state carries past costs.

    State at stage ``t >= 1`` is ``(pi_{t-1}, c_{t-1}, ..., c_{t-p})``.
    """

    def __init__(self, cost_model, boxes):
        self.cost_model = cost_model
        super().__init__(cost_model.base, boxes)

    def _check(self):
        spec = self.cost_model.spec
        self.lag = spec.lag

    def cost_dim(self, s):
        """Length of the cost vector of stage ``s`` (negative ``s`` use initial data)."""
        return self.instance.n(s) if s >= 0 else self.cost_model.spec.initial[-s].size

    def state_dim(self, t):
        if t == 0:
            return 0
        return self.instance.m(t - 1) + sum(self.cost_dim(t - 1 - l) for l in range(self.lag))

    def _cost_affine(self, t, j):
        """``c_tj = k0 + K @ (c_{t-1}, ..., c_{t-p})`` for ``t >= 1``."""
        spec = self.cost_model.spec
        eps, _ = spec.support[t][j]
        K = np.hstack([eps[:, None] * P for P in spec.Phi[t]])
        return eps * spec.mu[t], K

    def coupling(self, t, key, G, A_prev, c_prev):
        n_prev = A_prev.shape[1]
        H = np.zeros((n_prev, self.state_dim(t)))
        m_prev = A_prev.shape[0]
        H[:, :m_prev] = -A_prev.T
        H[:, m_prev:m_prev + n_prev] = np.eye(n_prev)
        return G, np.zeros(n_prev), H

    def own_rows(self, t, j, r):
        d = self.state_dim(t)
        if t == 0:
            return r.A.T, self.cost_model.spec.initial[0].copy(), np.zeros((r.A.shape[1], 0))
        k0, K = self._cost_affine(t, j)
        H = np.zeros((k0.size, d))
        H[:, self.instance.m(t - 1):] = K
        return r.A.T, k0, H

    def next_map(self, t, j):
        m = self.instance.m(t)
        d, d_next = self.state_dim(t), self.state_dim(t + 1)
        P = np.zeros((d_next, m))
        P[:m] = np.eye(m)
        q0 = np.zeros(d_next)
        Q = np.zeros((d_next, d))
        hist_next = [self.cost_dim(t - l) for l in range(self.lag)]
        if t == 0:
            init = self.cost_model.initial_history()
            q0[m:] = np.concatenate(init)[:sum(hist_next)]
            return P, q0, Q, 0
        k0, K = self._cost_affine(t, j)
        m_prev = self.instance.m(t - 1)
        n_t = hist_next[0]
        q0[m:m + n_t] = k0
        Q[m:m + n_t, m_prev:] = K
        # shift the older costs down by one lag
        keep = sum(hist_next[1:])
        Q[m + n_t:m + n_t + keep, m_prev:m_prev + keep] = np.eye(keep)
        return P, q0, Q, 0


# ------------------------------------------------------------- stage LPs


@dataclass
class BlockSolution:
    value: float
    pis: np.ndarray
    zeta: np.ndarray
    gradient: np.ndarray
    sol: object


class DualStageLp:
    """Persistent block LP of one ``(stage, key)``.

    Column layout: ``pi`` of every block, then one epigraph variable per block
    (stages with a successor), then coupling slacks (penalized runs).
    """

    def __init__(self, spec, theta_upper=None, penalized=False):
        self.spec = spec
        N, m, d = spec.N, spec.m, spec.state_dim
        self.N, self.m, self.d = N, m, d
        self.has_theta = spec.next is not None
        self.n_coupling = spec.coupling[0].shape[0] if spec.coupling is not None else 0
        self.penalized = penalized and self.n_coupling > 0
        n_pi = N * m
        n_theta = N if self.has_theta else 0
        n_zeta = self.n_coupling if self.penalized else 0
        self.theta_cols = np.arange(n_pi, n_pi + n_theta)
        self.zeta_cols = np.arange(n_pi + n_theta, n_pi + n_theta + n_zeta)
        ncol = n_pi + n_theta + n_zeta
        self._ncol = ncol
        cost = np.concatenate([(spec.p[:, None] * spec.obj).ravel(), spec.p if self.has_theta else [],
                               np.zeros(n_zeta)])
        lower = np.concatenate([np.tile(spec.lower, N), np.full(n_theta, -np.inf), np.zeros(n_zeta)])
        tu = np.inf if theta_upper is None else theta_upper
        upper = np.concatenate([np.tile(spec.upper, N), np.full(n_theta, tu), np.full(n_zeta, np.inf)])

        rows, h0, H, kinds = [], [], [], []
        if spec.coupling is not None:
            G, c0, CH = spec.coupling
            blocks = [sp.csr_matrix(G), sp.csr_matrix((G.shape[0], n_theta))]
            if n_zeta:
                blocks.append(-sp.eye(n_zeta, format="csr"))
            rows.append(sp.hstack(blocks, format="csr"))
            h0.append(c0); H.append(CH); kinds += ["coupling"] * G.shape[0]
        if spec.own is not None:
            for j, (M, o0, OH) in enumerate(spec.own):
                rows.append(self._block_rows(j, M))
                h0.append(o0); H.append(OH); kinds += ["own"] * M.shape[0]
        if rows:
            mat = sp.vstack(rows, format="csr")
            self._h0 = np.concatenate(h0)
            self._H = np.vstack(H) if d else np.zeros((self._h0.size, 0))
        else:
            mat = sp.csr_matrix((0, ncol))
            self._h0 = np.zeros(0)
            self._H = np.zeros((0, d))
        self._h0_chunks, self._H_chunks = [], []
        self._stale = True
        self.kinds = kinds
        prob = LpProblem(cost, mat, np.full(mat.shape[0], "<"), self._h0, lower, upper, sense="max")
        self.lp = IncrementalLp(prob)

    def _block_rows(self, j, M, theta_coef=None):
        """Rows acting on ``pi_j`` (and optionally ``theta_j``) in full column space."""
        return self._rows_for([(j, row, theta_coef) for row in np.atleast_2d(M)])

    def _rows_for(self, entries):
        """Sparse rows from ``(block, coefficients on pi_block, theta coefficient)`` triples."""
        r, c, v = [], [], []
        cols = np.arange(self.m)
        for i, (j, coef, th) in enumerate(entries):
            coef = np.asarray(coef, dtype=float)
            nz = np.flatnonzero(coef)
            r.extend([i] * nz.size)
            c.extend(j * self.m + cols[nz])
            v.extend(coef[nz])
            if th is not None:
                r.append(i)
                c.append(self.theta_cols[j])
                v.append(th)
        return sp.csr_matrix((v, (r, c)), shape=(len(entries), self.lp.n if hasattr(self, "lp") else self._ncol))

    def set_penalty(self, v):
        if self.penalized:
            self.lp.set_costs(self.zeta_cols, -np.broadcast_to(v, self.zeta_cols.shape))

    def _append(self, rows, h0, H, kind):
        self.lp.add_rows(rows, np.full(rows.shape[0], -np.inf), h0)
        self._h0_chunks.append(np.asarray(h0, dtype=float))
        self._H_chunks.append(np.asarray(H, dtype=float).reshape(len(h0), self.d))
        self._stale = True
        self.kinds += [kind] * rows.shape[0]

    @property
    def h0(self):
        self._merge()
        return self._h0

    @property
    def H(self):
        self._merge()
        return self._H

    def _merge(self):
        if self._stale:
            self._h0 = np.concatenate([self._h0] + self._h0_chunks)
            self._H = np.vstack([self._H] + self._H_chunks)
            self._h0_chunks, self._H_chunks = [], []
            self._dep = np.flatnonzero(np.any(self._H != 0, axis=1)) if self.d else np.zeros(0, dtype=int)
            self._stale = False

    def add_optimality_cut(self, cut, key):
        """Bound every block whose successor pool is ``key`` by ``cut``."""
        beta = cut.gradient
        entries, h0, H = [], [], []
        for j, (P, q0, Q, nk) in enumerate(self.spec.next):
            if nk == key:
                entries.append((j, -beta @ P, 1.0))
                h0.append(cut.intercept + beta @ q0)
                H.append(Q.T @ beta)
        if entries:
            self._append(self._rows_for(entries), np.array(h0), np.array(H), "optimality")

    def add_feasibility_cut(self, fcut, key):
        a = fcut.normal
        entries, h0, H = [], [], []
        for j, (P, q0, Q, nk) in enumerate(self.spec.next):
            if nk == key:
                entries.append((j, a @ P, None))
                h0.append(fcut.offset - a @ q0)
                H.append(-Q.T @ a)
        if entries:
            self._append(self._rows_for(entries), np.array(h0), np.array(H), "feasibility")

    def rhs(self, s):
        return self.h0 + (self.H @ s if self.d else 0.0)

    def solve(self, s):
        s = np.asarray(s, dtype=float)
        self._merge()
        if self._dep.size:
            r = self.h0[self._dep] + self.H[self._dep] @ s
            self.lp.set_row_bounds(self._dep, -np.inf, r)
        sol = self.lp.solve()
        if sol.status is Status.INFEASIBLE:
            sol = self._solve_near_boundary(s)
            if sol is None:
                return None
        if sol.status is not Status.OPTIMAL:
            raise DualSolveError(f"stage {self.spec.t} block problem is {sol.status.value}")
        pis = sol.primal[:self.N * self.m].reshape(self.N, self.m)
        zeta = sol.primal[self.zeta_cols] if self.zeta_cols.size else np.zeros(0)
        grad = self.H.T @ sol.duals if self.d else np.zeros(0)
        return BlockSolution(sol.objective, pis, zeta, grad, sol)

    def _solve_near_boundary(self, s):
        """Re-solve with the constraint rows loosened when the solver reports
        infeasibility but the least total violation is at noise level.

        Loosening only enlarges the feasible set, so the value stays an upper bound.
        """
        neg_viol, _ = self.violation(s)
        if -neg_viol > TIGHT_VIOLATION:
            return None
        rhs = self.rhs(s)
        rows = np.flatnonzero([k != "optimality" for k in self.kinds])
        delta = 2 * max(-neg_viol, 0.0) + TIGHT_VIOLATION
        sol = None
        for _ in range(4):
            self.lp.set_row_bounds(rows, -np.inf, rhs[rows] + delta)
            sol = self.lp.solve()
            if sol.status is not Status.INFEASIBLE:
                break
            delta *= 10
        self.lp.set_row_bounds(rows, -np.inf, rhs[rows])
        return None if sol.status is Status.INFEASIBLE else sol

    def violation(self, s):
        """Minimal total violation of the constraint rows at state ``s``.

        Returns ``(-violation, gradient)``: the negated violation is concave
        in ``s`` and the gradient is read from its row multipliers.
        """
        mat = self.lp.matrix().tocsr()
        rhs = self.rhs(s)
        cons = np.array([k != "optimality" for k in self.kinds])
        k = int(cons.sum())
        slack = sp.csr_matrix((-np.ones(k), (np.flatnonzero(cons), np.arange(k))), shape=(mat.shape[0], k))
        n = self.lp.n
        cost = np.r_[np.zeros(n), -np.ones(k)]
        lower = np.r_[self.lp.lower, np.zeros(k)]
        upper = np.r_[self.lp.upper, np.full(k, np.inf)]
        if self.zeta_cols.size:
            upper[self.zeta_cols] = 0.0
        prob = LpProblem(cost, sp.hstack([mat, slack], format="csr"), np.full(mat.shape[0], "<"), rhs,
                         lower, upper, sense="max")
        sol = solve_lp(prob)
        if sol.status is not Status.OPTIMAL:
            raise DualSolveError(f"violation problem at stage {self.spec.t} is {sol.status.value}")
        grad = self.H.T @ sol.duals if self.d else np.zeros(0)
        return sol.objective, grad

    def explicit_cut(self, s):
        """Cut from an explicit solution of the dual of the block problem.

        Variables are nonnegative row multipliers (coupling multipliers capped
        by the penalty when slacks are present, multipliers of the last-stage
        constraints, weights on next-stage cuts summing to the block
        probability) plus multipliers of the box bounds. The cut is
        ``intercept = h0' lam + upper' mu_up - lower' mu_lo`` and
        ``gradient = H' lam``.
        """
        mat = self.lp.matrix().tocsr()
        f = self.lp.cost
        lo, up = self.lp.lower, self.lp.upper
        n, r = mat.shape[1], mat.shape[0]
        has_up = np.isfinite(up)
        has_lo = np.isfinite(lo)
        iu, il = np.flatnonzero(has_up), np.flatnonzero(has_lo)
        Eu = sp.csr_matrix((np.ones(iu.size), (iu, np.arange(iu.size))), shape=(n, iu.size))
        El = sp.csr_matrix((-np.ones(il.size), (il, np.arange(il.size))), shape=(n, il.size))
        cons = sp.hstack([mat.T, Eu, El], format="csr")
        cost = np.r_[self.rhs(s), up[iu], -lo[il]]
        prob = LpProblem(cost, cons, np.full(n, "="), f, lower=np.zeros(cost.size), sense="min")
        sol = solve_lp(prob)
        if sol.status is not Status.OPTIMAL:
            raise DualSolveError(f"explicit cut problem at stage {self.spec.t} is {sol.status.value}")
        lam = sol.primal[:r]
        mu_up = sol.primal[r:r + iu.size]
        mu_lo = sol.primal[r + iu.size:]
        grad = self.H.T @ lam if self.d else np.zeros(0)
        intercept = float(self.h0 @ lam + up[iu] @ mu_up - lo[il] @ mu_lo)
        return intercept, grad, sol.objective


# ------------------------------------------------------------------- driver


@dataclass(frozen=True, eq=False)
class FeasibilityCut:
    """``normal @ state <= offset`` for every state admitting a feasible continuation."""

    stage: int
    key: object
    normal: np.ndarray
    offset: float
    iteration: int

    def satisfied(self, state, tol=1e-7):
        return float(self.normal @ state) <= self.offset + tol * (1 + abs(self.offset))

    def to_dict(self):
        key = self.key if isinstance(self.key, (int, str)) else repr(self.key)
        return {"stage": self.stage, "key": key, "normal": [float(x) for x in self.normal],
                "offset": float(self.offset), "iteration": self.iteration}


def write_feasibility_cuts(cuts, path):
    """One JSON object per line, in generation order."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for c in cuts:
            fh.write(json.dumps(c.to_dict()) + "\n")


@dataclass
class DualConfig:
    max_iters: int = 200
    seed: int = 0
    lower_bound: float = None
    gap_tol: float = 0.0
    cut_method: str = "duals"
    max_backtracks: int = 10000


@dataclass
class DualTrace:
    ub: list = field(default_factory=list)
    penalty: list = field(default_factory=list)
    max_zeta: list = field(default_factory=list)
    stage_zeta: list = field(default_factory=list)

    def __len__(self):
        return len(self.ub)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "ub_dual", "penalty_scalar", "max_zeta"])
            for k, (u, v, z) in enumerate(zip(self.ub, self.penalty, self.max_zeta), start=1):
                w.writerow([k, repr(float(u)), repr(float(v)), repr(float(z))])


@dataclass
class DualResult:
    policy: PolicyApprox
    trace: DualTrace
    upper_bound: float
    iterations: int
    feasibility_cuts: list
    first_stage: np.ndarray
    solver: "DualSddp" = None


class DualSddp:
    """Cut pools and block LPs for one dual SDDP run.

    Parameters
    ----------
    model : DualModel
    schedule : PenaltySchedule or None
        Penalized relaxation when given; feasibility cuts otherwise.
    """

    def __init__(self, model, schedule=None, cut_method="duals"):
        self.model = model
        self.schedule = schedule
        self.cut_method = cut_method
        T = model.T
        self.penalized = schedule is not None
        self._k = 0
        self.policy = PolicyApprox("upper")
        self.feasibility_cuts = []
        # constant upper bound on the tail value from each stage on
        tail = np.zeros(T + 1)
        for t in range(T - 1, -1, -1):
            tail[t] = tail[t + 1] + model.stage_objective_bound(t)
        self.tail = tail
        self.lps = {}
        for t in range(T):
            for key in model.keys(t):
                spec = model.stage(t, key)
                theta_up = tail[t + 1] if t < T - 1 else None
                self.lps[t, key] = DualStageLp(spec, theta_up, self.penalized)
                if t >= 1:
                    pool = self.policy.pool((t, key), spec.state_dim)
                    pool.add(Cut(t, float(tail[t]), np.zeros(spec.state_dim), 0))

    def set_iteration(self, k):
        if self.penalized:
            v = penalty_value(self.schedule, k)
            for lp in self.lps.values():
                lp.set_penalty(v)
            return v
        return math.nan

    def stage_lps(self, t):
        return [lp for (s, _), lp in self.lps.items() if s == t]

    def add_cut(self, t, key, cut):
        if self.policy.pool((t, key)).add(cut):
            for lp in self.stage_lps(t - 1):
                lp.add_optimality_cut(cut, key)

    def add_feasibility_cut(self, fcut):
        self.feasibility_cuts.append(fcut)
        for lp in self.stage_lps(fcut.stage - 1):
            lp.add_feasibility_cut(fcut, fcut.key)

    def first_stage(self):
        sol = self.lps[0, 0].solve(np.zeros(0))
        if sol is None:
            raise RootInfeasible("first-stage dual problem is infeasible")
        return sol

    def next_state(self, t, key, j, pis, s):
        P, q0, Q, nk = self.lps[t, key].spec.next[j]
        return P @ pis[j] + q0 + (Q @ s if Q.size else 0.0), nk

    def forward(self, rng, max_backtracks=10000):
        """One sampled pass; returns trial states ``[(t, key, s)]``, sampled
        indices, selected multipliers and per-stage slack maxima."""
        T = self.model.T
        inst = self.model.instance
        idx = [0] + [int(rng.choice(inst.N(t), p=inst.probs(t))) for t in range(1, T)]
        states = [(0, 0, np.zeros(0))] + [None] * (T - 1)
        pis = [None] * T
        zeta = np.zeros(T)
        t = 0
        backtracks = 0
        while t < T:
            _, key, s = states[t]
            lp = self.lps[t, key]
            sol = lp.solve(s)
            if sol is None:
                if self.penalized:
                    raise DualSolveError(f"penalized block problem infeasible at stage {t}")
                if t == 0:
                    raise RootInfeasible("feasibility cuts leave no admissible first-stage multiplier")
                neg_viol, g = lp.violation(s)
                self.add_feasibility_cut(FeasibilityCut(t, key, -g, float(neg_viol - g @ s), self._k))
                backtracks += 1
                if backtracks > max_backtracks:
                    raise DualSolveError("too many feasibility backtracks in one pass")
                t -= 1
                continue
            j = idx[t]
            pis[t] = sol.pis[j]
            zeta[t] = float(sol.zeta.max(initial=0.0))
            if t + 1 < T:
                s_next, nk = self.next_state(t, key, j, sol.pis, s)
                states[t + 1] = (t + 1, nk, s_next)
            t += 1
        return states, idx, pis, zeta

    def backward(self, states, k):
        for t in range(self.model.T - 1, 0, -1):
            _, key, s = states[t]
            lp = self.lps[t, key]
            if self.cut_method == "explicit":
                intercept, grad, _ = lp.explicit_cut(s)
            else:
                sol = lp.solve(s)
                if sol is None:
                    raise DualSolveError(f"block problem infeasible at a trial state of stage {t}")
                grad = sol.gradient
                intercept = sol.value - float(grad @ s)
            self.add_cut(t, key, Cut(t, intercept, grad, k))

    def value(self):
        return self.first_stage().value


def run_dual_sddp(model, schedule=None, config=None, **kwargs):
    """Run dual SDDP on ``model``; penalized when ``schedule`` is given.

    Stops after ``max_iters`` or once ``(ub - lower_bound) / |ub| <= gap_tol``
    when a lower bound (for instance from primal SDDP) is supplied.
    """
    config = config or DualConfig(**kwargs)
    solver = DualSddp(model, schedule, config.cut_method)
    trace = DualTrace()
    k = 0
    for k in range(1, config.max_iters + 1):
        solver._k = k
        v = solver.set_iteration(k)
        rng = np.random.default_rng([config.seed, k])
        states, _, _, zeta = solver.forward(rng, config.max_backtracks)
        solver.backward(states, k)
        ub = solver.value()
        trace.ub.append(ub)
        trace.penalty.append(v)
        trace.max_zeta.append(float(zeta.max(initial=0.0)))
        trace.stage_zeta.append(zeta)
        if config.lower_bound is not None:
            if (ub - config.lower_bound) / max(abs(ub), 1e-10) <= config.gap_tol:
                break
    first = solver.first_stage().pis[0]
    return DualResult(solver.policy, trace, trace.ub[-1] if trace.ub else math.nan, k,
                      list(solver.feasibility_cuts), first, solver)


def _boxes(instance, boxes):
    return dual_boxes(instance) if boxes is None else boxes


def run_dual_sddp_penalized(instance, boxes=None, schedule=None, config=None, **kwargs):
    """Penalized dual SDDP on a plain instance (``A`` and ``c`` fixed)."""
    schedule = schedule or PenaltySchedule(1e3)
    return run_dual_sddp(DualModel(instance, _boxes(instance, boxes)), schedule, config, **kwargs)


def run_dual_sddp_feasibility_cuts(instance, boxes=None, config=None, **kwargs):
    """Dual SDDP without slacks; infeasible trial states are cut off and the
    forward pass backs up one stage."""
    return run_dual_sddp(DualModel(instance, _boxes(instance, boxes)), None, config, **kwargs)


def run_dual_sddp_all_random(instance, boxes=None, schedule=None, config=None, **kwargs):
    """Penalized dual SDDP with value functions indexed by the previous realization."""
    schedule = schedule or PenaltySchedule(1e3)
    return run_dual_sddp(AllRandomDualModel(instance, _boxes(instance, boxes)), schedule, config, **kwargs)


def build_interstage_cost_dual(cost_model, boxes=None):
    """Dual model with past costs in the state; feed it to :func:`run_dual_sddp`."""
    from .instances import InvalidProcess
    spec = cost_model.spec
    for t in range(1, cost_model.T):
        for e, _ in spec.support[t]:
            if np.any(e <= 0):
                raise InvalidProcess(f"stage {t}: noise support must be strictly positive")
    if boxes is None:
        boxes = dual_boxes(cost_model.envelope_instance())
    return InterstageCostDualModel(cost_model, boxes)


# ---------------------------------------------------------------- simulation


def simulate_dual_policy(result, n_sims, seed):
    """Forward-simulate the dual policy; records the multiplier of the
    sampled realization at each stage. Block solutions are cached by state."""
    solver = result.solver if isinstance(result, DualResult) else result
    model = solver.model
    inst = model.instance
    T = inst.T
    rng = np.random.default_rng(seed)
    idx = np.zeros((n_sims, T), dtype=int)
    for t in range(1, T):
        idx[:, t] = rng.choice(inst.N(t), size=n_sims, p=inst.probs(t))
    duals = [np.zeros((n_sims, inst.m(t))) for t in range(T)]
    degen = np.zeros((n_sims, T), dtype=bool)
    cache = {}

    def block(t, key, s):
        ck = (t, key, s.tobytes())
        if ck not in cache:
            sol = solver.lps[t, key].solve(s)
            if sol is None:
                raise DualSolveError(f"dual block problem infeasible at stage {t} during simulation")
            cache[ck] = sol
        return cache[ck]

    for n in range(n_sims):
        key, s = 0, np.zeros(0)
        for t in range(T):
            sol = block(t, key, s)
            j = idx[n, t]
            duals[t][n] = sol.pis[j]
            degen[n, t] = sol.sol.degenerate
            if t + 1 < T:
                s, key = solver.next_state(t, key, j, sol.pis, s)
    return MultiplierTrajectories(duals, [None] * T, idx, np.full(n_sims, np.nan), degen)
