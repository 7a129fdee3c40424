"""Derivatives of the optimal value from optimal multipliers.

When the primal and dual solutions are unique, the derivative of the optimal
value in a parameter ``u`` is the expected derivative of the Lagrangian,
``E[ sum_t pi_t' d(b_t - B_t x_{t-1} - A_t x_t)/du + d(c_t' x_t)/du ]``,
estimated here by Monte Carlo over simulated multiplier trajectories.
"""
from dataclasses import dataclass, field
import csv
import math
import warnings

import numpy as np

from .instances import DEMAND_ROW


class EmptySample(ValueError):
    pass


class MissingRealizationData(ValueError):
    pass


class SolveFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float
    n: int

    def __float__(self):
        return self.value


def _mean_se(samples):
    x = np.asarray(samples, dtype=float)
    if x.size == 0:
        raise EmptySample("no simulated trajectories")
    # fixed-order summation keeps results reproducible
    mean = math.fsum(x) / x.size
    se = float(np.std(x, ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0
    return Estimate(mean, se, x.size)


def lagrangian_gradient_derivative(trajectories, integrand):
    """Monte Carlo mean of ``sum_t integrand(t, pi_t, j_t, path)`` with its standard error.

    ``trajectories`` is a :class:`~mspduals.primal.MultiplierTrajectories`;
    ``integrand(t, pi, j, n)`` receives the stage, the stage multiplier, the
    sampled realization index and the path number.
    """
    n_sims = trajectories.n_sims
    if n_sims == 0:
        raise EmptySample("no simulated trajectories")
    if np.any(trajectories.degenerate):
        warnings.warn("some stage solutions were degenerate; the multipliers, and hence the "
                      "derivative, may not be unique", RuntimeWarning)
    T = len(trajectories.duals)
    totals = np.zeros(n_sims)
    for n in range(n_sims):
        totals[n] = math.fsum(integrand(t, trajectories.duals[t][n], trajectories.realizations[n, t], n)
                              for t in range(T))
    return _mean_se(totals)


def demand_paths(spec, noise, realizations):
    """Noise ``eps_t`` and previous demand ``D_{t-1}`` along sampled paths.

    ``noise[t]`` is the noise support of stage ``t`` (stage 0 a single 1).
    """
    if noise is None or realizations is None:
        raise MissingRealizationData("noise support and sampled indices are required")
    n_sims, T = realizations.shape
    eps = np.column_stack([np.asarray(noise[t])[realizations[:, t]] for t in range(T)])
    prev = np.empty((n_sims, T))
    d = np.full(n_sims, float(spec.D0))
    for t in range(T):
        prev[:, t] = d
        d = eps[:, t] * (spec.phi * d + spec.mu)
    return eps, prev


def inventory_parameter_derivatives(spec, trajectories, noise):
    """Derivatives of the optimal value in ``phi`` and ``mu`` for the
    autoregressive-demand inventory model.

    Uses the demand-row multipliers ``pi_t``:
    ``d/dmu = E[sum_t pi_t eps_t]`` and ``d/dphi = E[sum_t pi_t eps_t D_{t-1}]``.

    Returns
    -------
    (Estimate, Estimate)
        ``(d_phi, d_mu)``.
    """
    if trajectories.realizations is None:
        raise MissingRealizationData("trajectories carry no realization indices")
    eps, prev = demand_paths(spec, noise, trajectories.realizations)
    pi = np.column_stack([D[:, DEMAND_ROW] for D in trajectories.duals])
    if np.any(trajectories.degenerate):
        warnings.warn("some stage solutions were degenerate; the multipliers, and hence the "
                      "derivative, may not be unique", RuntimeWarning)
    d_mu = _mean_se(np.sum(pi * eps, axis=1))
    d_phi = _mean_se(np.sum(pi * eps * prev, axis=1))
    return d_phi, d_mu


def default_delta(u0):
    return 1e-4 * max(1.0, abs(u0))


def finite_difference_derivative(solve, u0, delta=None):
    """Central difference ``(v(u0+delta) - v(u0-delta)) / (2 delta)``.

    ``solve`` must be deterministic in its argument (common random numbers).
    """
    delta = default_delta(u0) if delta is None else delta
    if delta <= 0:
        raise ValueError("delta must be positive")
    try:
        hi = float(solve(u0 + delta))
        lo = float(solve(u0 - delta))
    except Exception as exc:
        raise SolveFailed(f"solve failed near u={u0}: {exc}") from exc
    if not (math.isfinite(hi) and math.isfinite(lo)):
        raise SolveFailed(f"non-finite value near u={u0}")
    return (hi - lo) / (2 * delta)


def delta_sweep(solve, u0, deltas):
    """Central differences for a decreasing sequence of steps."""
    return [(d, finite_difference_derivative(solve, u0, d)) for d in deltas]


def demand_moments(spec, t):
    """Mean and variance of ``D_t`` (``t >= 1``, one-based) from the moment recursion."""
    if t < 1:
        raise ValueError("t counts periods from 1")
    mean, second = float(spec.D0), float(spec.D0) ** 2
    var = 0.0
    for _ in range(t):
        # Z = phi D + mu; D_new = eps Z with E eps = 1, E eps^2 = 1 + sigma2
        z1 = spec.phi * mean + spec.mu
        z2 = spec.phi ** 2 * second + 2 * spec.phi * spec.mu * mean + spec.mu ** 2
        var = spec.sigma2 * z2 + spec.phi ** 2 * var
        mean, second = z1, (1 + spec.sigma2) * z2
    return mean, var


@dataclass
class SensitivityRow:
    param: str
    fd: float
    estimate: Estimate
    n_sims: int
    delta: float

    @property
    def gap_percent(self):
        return 100.0 * abs(self.fd - self.estimate.value) / abs(self.fd) if self.fd else math.inf


@dataclass
class SensitivityReport:
    rows: list = field(default_factory=list)

    def __getitem__(self, param):
        for r in self.rows:
            if r.param == param:
                return r
        raise KeyError(param)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["param", "fd", "estimate", "gap_percent", "n_sims", "delta"])
            for r in self.rows:
                w.writerow([r.param, repr(float(r.fd)), repr(float(r.estimate.value)),
                            repr(float(r.gap_percent)), r.n_sims, repr(float(r.delta))])


def relative_delta(u0, rel=1e-4):
    """Step proportional to ``|u0|`` (``rel`` itself when ``u0 = 0``).

    Useful when the parameter is small: the absolute default step would be a
    large fraction of it.
    """
    return rel * abs(u0) if u0 else rel


def inventory_sensitivity(config, params=("phi", "mu"), n_sims=10_000, primal_iters=100, seed=1,
                          sim_seed=5, deltas=None, noise=None):
    """Compare multiplier-based derivatives of the optimal value of the
    autoregressive inventory model with finite differences.

    Both sides use primal SDDP with ``primal_iters`` iterations and ``seed``;
    the perturbed instances share the noise support of the base instance, so
    the finite difference uses common random numbers.

    Parameters
    ----------
    config : InventoryConfig
        Must carry a :class:`DemandProcessSpec`.
    deltas : dict, optional
        Step per parameter; defaults to :func:`relative_delta`.

    Returns
    -------
    SensitivityReport
    """
    from dataclasses import replace
    from .instances import ar_inventory_noise, make_ar_inventory_instance
    from .primal import run_primal_sddp, extract_multiplier_trajectories

    spec = config.demand
    if spec is None:
        raise MissingRealizationData("the inventory config has no demand process")
    for p in params:
        if p not in ("phi", "mu"):
            raise ValueError(f"unknown parameter {p!r}")
    noise = ar_inventory_noise(config) if noise is None else noise

    def value(**change):
        cfg = replace(config, demand=replace(spec, **change))
        res = run_primal_sddp(make_ar_inventory_instance(cfg, noise), max_iters=primal_iters,
                              gap_tol=-math.inf, seed=seed)
        return res.lower_bound

    base = run_primal_sddp(make_ar_inventory_instance(config, noise), max_iters=primal_iters,
                           gap_tol=-math.inf, seed=seed)
    with warnings.catch_warnings():
        # the idle half of the split demand columns always has zero reduced cost,
        # so the degeneracy warning fires on every path and says nothing here
        warnings.simplefilter("ignore", RuntimeWarning)
        traj = extract_multiplier_trajectories(make_ar_inventory_instance(config, noise), base, n_sims, sim_seed)
        est = dict(zip(("phi", "mu"), inventory_parameter_derivatives(spec, traj, noise)))
    report = SensitivityReport()
    for p in params:
        u0 = getattr(spec, p)
        d = (deltas or {}).get(p) or relative_delta(u0)
        fd = finite_difference_derivative(lambda u, p=p: value(**{p: u}), u0, d)
        report.rows.append(SensitivityRow(p, fd, est[p], n_sims, d))
    return report
