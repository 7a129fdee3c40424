"""SDDP on the primal cost-to-go recursion.

Stage ``t`` with realization ``j`` and incoming state ``x_{t-1}`` solves

    min c_tj' x_t + theta  s.t.  A_tj x_t = b_tj - B_tj x_{t-1},  x_t >= 0,
                                 theta >= every cut of the stage t+1 pool,

and the cut pools under-approximate the expected cost-to-go ``Q_{t+1}``.
"""
from dataclasses import dataclass, field
import csv
import math
import warnings

import numpy as np
import scipy.sparse as sp
from scipy.stats import norm

from .cuts import Cut, PolicyApprox
from .lp import IncrementalLp, LpProblem, Status
from .model import enumerate_tree


class StageInfeasible(RuntimeError):
    """A stage problem has no feasible point for the incoming state."""

    def __init__(self, stage, realization, state):
        super().__init__(f"stage {stage} realization {realization} infeasible at state {np.round(state, 6).tolist()}")
        self.stage = stage
        self.realization = realization
        self.state = state


@dataclass
class PrimalConfig:
    max_iters: int = 500
    gap_tol: float = 1e-2
    confidence: float = 0.975
    seed: int = 0
    forward_paths: int = 1
    ub_mode: str = "statistical"
    exact_every: int = 5
    min_iters: int = 1
    state_bound: float = 1e4
    initial_lower: float = None


def realization_groups(instance, t):
    """Map each realization to the first one sharing its ``A`` and ``c``."""
    reals = instance.stages[t]
    rep = []
    for j, r in enumerate(reals):
        for k in sorted(set(rep)):
            q = reals[k]
            if np.array_equal(q.A, r.A) and np.array_equal(q.c, r.c):
                rep.append(k)
                break
        else:
            rep.append(j)
    return rep


class StageModels:
    """Persistent stage LPs; realizations sharing ``A`` and ``c`` share one model."""

    def __init__(self, instance, t, with_theta, theta_lower):
        self.instance = instance
        self.t = t
        self.m = instance.m(t)
        self.n = instance.n(t)
        self.with_theta = with_theta
        self.group = realization_groups(instance, t)
        self.models = {}
        for k in sorted(set(self.group)):
            r = instance.stages[t][k]
            ncol = self.n + (1 if with_theta else 0)
            cost = np.r_[r.c, 1.0] if with_theta else r.c
            mat = sp.hstack([sp.csr_matrix(r.A), sp.csr_matrix((self.m, 1))]) if with_theta else r.A
            lower = np.r_[np.zeros(self.n), theta_lower] if with_theta else np.zeros(self.n)
            prob = LpProblem(cost, mat, np.full(self.m, "="), r.b, lower=lower, upper=np.full(ncol, np.inf))
            self.models[k] = IncrementalLp(prob)
        self._rows = np.arange(self.m)

    def add_cut(self, cut):
        row = np.r_[-cut.gradient, 1.0][None, :]
        for lp in self.models.values():
            lp.add_rows(row, [cut.intercept], [np.inf])

    def solve(self, j, state):
        r = self.instance.stages[self.t][j]
        rhs = r.b - r.B @ state if r.B.size else r.b
        lp = self.models[self.group[j]]
        lp.set_row_bounds(self._rows, rhs, rhs)
        sol = lp.solve()
        if sol.status is not Status.OPTIMAL:
            if sol.status is Status.INFEASIBLE:
                raise StageInfeasible(self.t, j, state)
            raise RuntimeError(f"stage {self.t} problem is {sol.status.value}")
        return sol


def initial_lower_bounds(instance, state_bound, override=None):
    """Valid constant lower bounds on the cost-to-go from each stage onward."""
    T = instance.T
    out = np.zeros(T + 1)
    if override is not None:
        out[:T] = override
        out[T] = 0.0
        return out
    for t in range(T - 1, -1, -1):
        cmin = min(float(r.c.min()) for r in instance.stages[t])
        out[t] = out[t + 1] + min(0.0, cmin) * instance.n(t) * state_bound
    return out


@dataclass
class BoundsTrace:
    """Per-iteration bounds of a primal SDDP run."""

    seed: int
    lb: list = field(default_factory=list)
    ub_stat: list = field(default_factory=list)
    ub_exact: list = field(default_factory=list)
    sample_costs: list = field(default_factory=list)

    def __len__(self):
        return len(self.lb)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "lb", "ub_stat", "seed"])
            for k, (lb, ub) in enumerate(zip(self.lb, self.ub_stat), start=1):
                w.writerow([k, repr(float(lb)), repr(float(ub)), self.seed])


@dataclass
class PrimalResult:
    policy: PolicyApprox
    trace: BoundsTrace
    lower_bound: float
    upper_bound: float
    gap: float
    converged: bool
    iterations: int
    first_stage: np.ndarray
    solver: "PrimalSddp" = None


def relative_gap(lb, ub):
    if not math.isfinite(ub):
        return math.inf
    return (ub - lb) / max(abs(ub), 1e-10)


class PrimalSddp:
    """Cut pools and stage models for one primal SDDP run."""

    def __init__(self, instance, config=None):
        self.instance = instance
        self.config = config or PrimalConfig()
        T = instance.T
        self.floor = initial_lower_bounds(instance, self.config.state_bound, self.config.initial_lower)
        self.policy = PolicyApprox("lower")
        self.stages = []
        for t in range(T):
            last = t == T - 1
            self.stages.append(StageModels(instance, t, not last, self.floor[t + 1]))
            if t >= 1:
                pool = self.policy.pool(t, instance.n(t - 1))
                pool.add(Cut(t, float(self.floor[t]), np.zeros(instance.n(t - 1)), 0))

    @classmethod
    def from_policy(cls, instance, policy, config=None):
        """Rebuild stage models around an existing cut pool."""
        solver = cls(instance, config)
        for key in sorted(policy.pools):
            for cut in policy.pools[key]:
                solver.add_cut(cut)
        return solver

    def add_cut(self, cut):
        if self.policy.pool(cut.stage).add(cut):
            self.stages[cut.stage - 1].add_cut(cut)

    def solve_stage(self, t, j, state):
        sol = self.stages[t].solve(j, state)
        n, m = self.stages[t].n, self.stages[t].m
        x = sol.primal[:n]
        stage_cost = float(self.instance.stages[t][j].c @ x)
        return x, stage_cost, sol.duals[:m], sol

    def forward(self, rng):
        """One sampled path: states, realization indices, path cost, duals."""
        inst = self.instance
        state = np.zeros(0)
        xs, idx, duals = [], [], []
        cost = 0.0
        lb = None
        for t in range(inst.T):
            j = 0 if t == 0 else int(rng.choice(inst.N(t), p=inst.probs(t)))
            x, c, lam, sol = self.solve_stage(t, j, state)
            if t == 0:
                lb = sol.objective
            xs.append(x)
            idx.append(j)
            duals.append(lam)
            cost += c
            state = x
        return xs, idx, cost, duals, lb

    def backward(self, xs, iteration):
        inst = self.instance
        for t in range(inst.T - 1, 0, -1):
            state = xs[t - 1]
            value = 0.0
            grad = np.zeros(inst.n(t - 1))
            for j, r in enumerate(inst.stages[t]):
                _, _, lam, sol = self.solve_stage(t, j, state)
                value += r.p * sol.objective
                if r.B.size:
                    grad -= r.p * (r.B.T @ lam)
            self.add_cut(Cut(t, value - float(grad @ state), grad, iteration))

    def lower_bound(self):
        _, _, _, sol = self.solve_stage(0, 0, np.zeros(0))
        return sol.objective, sol.primal[:self.stages[0].n]

    def exact_policy_value(self, node_cap=10**5):
        """Expected cost of the current policy over the full scenario tree."""
        inst = self.instance
        idx = enumerate_tree(inst, node_cap)
        states = {}
        total = 0.0
        for k in range(len(idx)):
            t, j, par = idx.stage[k], idx.realization[k], idx.parent[k]
            state = states[par] if par >= 0 else np.zeros(0)
            x, c, _, _ = self.solve_stage(t, j, state)
            states[k] = x
            total += idx.prob[k] * c
        return total


def statistical_upper_bound(costs, confidence):
    n = len(costs)
    if n < 2:
        return math.inf
    arr = np.asarray(costs)
    return float(arr.mean() + norm.ppf(confidence) * arr.std(ddof=1) / math.sqrt(n))


def run_primal_sddp(instance, config=None, **kwargs):
    """Run primal SDDP until the relative gap drops below ``gap_tol``.

    ``ub_mode="statistical"`` bounds the policy cost with a one-sided normal
    confidence interval over all forward-pass costs; ``"exact"`` evaluates
    the policy on the full scenario tree every ``exact_every`` iterations
    (small trees only) and is what allows gaps near machine precision.
    """
    config = config or PrimalConfig(**kwargs)
    solver = PrimalSddp(instance, config)
    trace = BoundsTrace(config.seed)
    ub_exact = math.inf
    lb, gap, x1 = -math.inf, math.inf, None
    converged = False
    k = 0
    for k in range(1, config.max_iters + 1):
        rng = np.random.default_rng([config.seed, k])
        paths = [solver.forward(rng) for _ in range(config.forward_paths)]
        for xs, _, cost, _, _ in paths:
            trace.sample_costs.append(cost)
        for xs, *_ in paths:
            solver.backward(xs, k)
        lb, x1 = solver.lower_bound()
        ub_stat = statistical_upper_bound(trace.sample_costs, config.confidence)
        if config.ub_mode == "exact" and (k % config.exact_every == 0 or k == config.max_iters):
            ub_exact = min(ub_exact, solver.exact_policy_value())
        if trace.lb and trace.lb[-1] - 1e-9 * (1 + abs(lb)) <= lb < trace.lb[-1]:
            # cut pools only grow, so a drop this small is solver noise
            lb = trace.lb[-1]
        trace.lb.append(lb)
        trace.ub_stat.append(ub_stat)
        trace.ub_exact.append(ub_exact)
        ub = ub_exact if config.ub_mode == "exact" else ub_stat
        gap = relative_gap(lb, ub)
        if k >= config.min_iters and gap < config.gap_tol:
            converged = True
            break
    ub = trace.ub_exact[-1] if config.ub_mode == "exact" else trace.ub_stat[-1]
    return PrimalResult(solver.policy, trace, lb, ub, gap, converged, k, x1, solver)


@dataclass
class MultiplierTrajectories:
    """Forward simulations of a policy with stage duals.

    ``duals[t]`` has shape ``(n_sims, m_t)``, ``states[t]`` ``(n_sims, n_t)``
    and ``realizations`` ``(n_sims, T)``.
    """

    duals: list
    states: list
    realizations: np.ndarray
    costs: np.ndarray
    degenerate: np.ndarray

    @property
    def n_sims(self):
        return self.realizations.shape[0]

    def stage_means(self, component=0):
        d = np.array([D[:, component] for D in self.duals]).T
        return d.mean(axis=0), d.std(axis=0, ddof=1) / math.sqrt(d.shape[0])


def extract_multiplier_trajectories(instance, policy, n_sims, seed):
    """Simulate ``n_sims`` paths of the cut policy and record stage duals along each.

    ``policy`` is a :class:`PolicyApprox`, a :class:`PrimalSddp` or a
    :class:`PrimalResult`.
    """
    if isinstance(policy, PrimalResult):
        policy = policy.solver
    solver = policy if isinstance(policy, PrimalSddp) else PrimalSddp.from_policy(instance, policy)
    inst = instance
    T = inst.T
    rng = np.random.default_rng(seed)
    idx = np.zeros((n_sims, T), dtype=int)
    idx[:, 1:] = np.column_stack([rng.choice(inst.N(t), size=n_sims, p=inst.probs(t))
                                  for t in range(1, T)]) if T > 1 else idx[:, 1:]
    duals = [np.zeros((n_sims, inst.m(t))) for t in range(T)]
    states = [np.zeros((n_sims, inst.n(t))) for t in range(T)]
    costs = np.zeros(n_sims)
    degen = np.zeros((n_sims, T), dtype=bool)
    for s in range(n_sims):
        state = np.zeros(0)
        for t in range(T):
            x, c, lam, sol = solver.solve_stage(t, idx[s, t], state)
            duals[t][s] = lam
            states[t][s] = x
            degen[s, t] = sol.degenerate
            costs[s] += c
            state = x
    if degen.any():
        warnings.warn(f"{int(degen.sum())} stage problems had degenerate solutions; "
                      "multipliers may not be unique", RuntimeWarning)
    return MultiplierTrajectories(duals, states, idx, costs, degen)
