import csv
import dataclasses
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mspduals.instances import (
    DemandProcessSpec, InventoryConfig, ar_inventory_noise, make_ar_inventory_instance,
)
from mspduals.model import MslpInstance, StageRealization, solve_deterministic_equivalent
from mspduals.primal import MultiplierTrajectories, extract_multiplier_trajectories, run_primal_sddp
from mspduals.sensitivity import (
    EmptySample, Estimate, MissingRealizationData, SensitivityReport, SensitivityRow, SolveFailed,
    delta_sweep, demand_moments, finite_difference_derivative, inventory_parameter_derivatives,
    inventory_sensitivity, lagrangian_gradient_derivative,
)

from conftest import inventory

EXACT = dict(ub_mode="exact", exact_every=1, gap_tol=1e-9, max_iters=300)


def shifted(instance, u, direction):
    """Every right-hand side moved by ``u * direction[t]``."""
    return MslpInstance(tuple(
        tuple(StageRealization(r.A, r.B, r.c, r.b + u * direction[t], r.p) for r in instance.stages[t])
        for t in range(instance.T)))


def node_expectation(instance, weight):
    """``E[sum_t weight(t, j, pi_t)]`` over the tree from deterministic-equivalent duals."""
    _, sol, idx = solve_deterministic_equivalent(instance)
    node = idx.node_duals(sol.duals)
    return sum(idx.prob[k] * weight(idx.stage[k], idx.realization[k], node[k]) for k in range(len(idx)))


def test_zero_integrand_gives_zero():
    traj = MultiplierTrajectories([np.ones((5, 1))] * 2, [None] * 2, np.zeros((5, 2), int),
                                  np.zeros(5), np.zeros((5, 2), bool))
    est = lagrangian_gradient_derivative(traj, lambda t, pi, j, n: 0.0)
    assert est.value == 0.0 and est.stderr == 0.0 and est.n == 5


def test_empty_sample_rejected():
    traj = MultiplierTrajectories([np.zeros((0, 1))], [None], np.zeros((0, 1), int),
                                  np.zeros(0), np.zeros((0, 1), bool))
    with pytest.raises(EmptySample):
        lagrangian_gradient_derivative(traj, lambda t, pi, j, n: 1.0)


def test_single_stage_derivative_is_the_price():
    # min 2x + 3y s.t. x + y = u: the value is 2u
    inst = MslpInstance(((StageRealization([[1.0, 1.0]], None, [2.0, 3.0], [4.0], 1.0),),))
    traj = extract_multiplier_trajectories(inst, run_primal_sddp(inst, max_iters=1), 10, seed=0)
    est = lagrangian_gradient_derivative(traj, lambda t, pi, j, n: pi[0])
    assert est.value == pytest.approx(2.0) and est.stderr == 0.0


def test_additive_rhs_matches_finite_differences():
    inst = inventory(3, 3, seed=3)
    e = [np.array([1.0])] * inst.T
    exact = node_expectation(inst, lambda t, j, pi: pi @ e[t])
    fd = finite_difference_derivative(
        lambda u: solve_deterministic_equivalent(shifted(inst, u, e))[0], 0.0, 1e-5)
    assert fd == pytest.approx(exact, rel=1e-3)
    res = run_primal_sddp(inst, **EXACT)
    traj = extract_multiplier_trajectories(inst, res, 2000, seed=1)
    est = lagrangian_gradient_derivative(traj, lambda t, pi, j, n: pi @ e[t])
    assert abs(est.value - exact) <= 4 * est.stderr + 1e-9


def test_nonlinear_parameter_uses_the_chain_rule():
    # b(u) = b + u^2: derivative 2u times the additive one
    inst = inventory(3, 2, seed=6)
    e = [np.array([1.0])] * inst.T
    u0 = 0.7
    exact = 2 * u0 * node_expectation(shifted(inst, u0 ** 2, e), lambda t, j, pi: pi @ e[t])
    fd = finite_difference_derivative(
        lambda u: solve_deterministic_equivalent(shifted(inst, u * u, e))[0], u0, 1e-5)
    assert fd == pytest.approx(exact, rel=1e-3)


def test_delta_sweep_and_failures():
    out = delta_sweep(lambda u: u ** 3, 1.0, [1e-1, 1e-2, 1e-3])
    errs = [abs(v - 3.0) for _, v in out]
    assert [d for d, _ in out] == [1e-1, 1e-2, 1e-3] and errs[0] > errs[1] > errs[2]
    with pytest.raises(ValueError):
        finite_difference_derivative(lambda u: u, 0.0, 0.0)
    with pytest.raises(SolveFailed):
        finite_difference_derivative(lambda u: np.inf, 0.0)


def ar_case():
    spec = DemandProcessSpec(0.3, 2.0, 0.25, 10.0, 3)
    cfg = InventoryConfig(T=3, N=3, demand=spec, seed=2)
    return spec, cfg, ar_inventory_noise(cfg)


@pytest.mark.filterwarnings("ignore:.*degenerate")
def test_demand_parameter_formulas_match_tree_differences():
    spec, cfg, noise = ar_case()

    def value(**change):
        c = dataclasses.replace(cfg, demand=dataclasses.replace(spec, **change))
        return solve_deterministic_equivalent(make_ar_inventory_instance(c, noise))[0]

    inst = make_ar_inventory_instance(cfg, noise)
    _, sol, idx = solve_deterministic_equivalent(inst)
    node = idx.node_duals(sol.duals)
    prev, d_mu, d_phi = {}, 0.0, 0.0
    for k in range(len(idx)):
        t, j, par = idx.stage[k], idx.realization[k], idx.parent[k]
        before = prev[par] if par >= 0 else spec.D0
        eps = noise[t][j]
        prev[k] = eps * (spec.phi * before + spec.mu)
        d_mu += idx.prob[k] * node[k][1] * eps
        d_phi += idx.prob[k] * node[k][1] * eps * before
    h = 1e-5
    assert (value(mu=spec.mu + h) - value(mu=spec.mu - h)) / (2 * h) == pytest.approx(d_mu, rel=1e-6)
    assert (value(phi=spec.phi + h) - value(phi=spec.phi - h)) / (2 * h) == pytest.approx(d_phi, rel=1e-6)

    res = run_primal_sddp(inst, **EXACT)
    traj = extract_multiplier_trajectories(inst, res, 3000, seed=3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        e_phi, e_mu = inventory_parameter_derivatives(spec, traj, noise)
    assert abs(e_mu.value - d_mu) <= 4 * e_mu.stderr
    assert abs(e_phi.value - d_phi) <= 4 * e_phi.stderr


@pytest.mark.filterwarnings("ignore:.*degenerate")
def test_estimates_scale_with_the_multipliers():
    spec, cfg, noise = ar_case()
    inst = make_ar_inventory_instance(cfg, noise)
    traj = extract_multiplier_trajectories(inst, run_primal_sddp(inst, max_iters=20), 50, seed=0)
    double = dataclasses.replace(traj, duals=[2 * D for D in traj.duals])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        a = inventory_parameter_derivatives(spec, traj, noise)
        b = inventory_parameter_derivatives(spec, double, noise)
    for x, y in zip(a, b):
        assert y.value == pytest.approx(2 * x.value, rel=1e-12)


def test_missing_noise_rejected():
    spec, cfg, noise = ar_case()
    traj = MultiplierTrajectories([np.zeros((2, 2))] * 3, [None] * 3, None, np.zeros(2), np.zeros((2, 3), bool))
    with pytest.raises(MissingRealizationData):
        inventory_parameter_derivatives(spec, traj, noise)
    with pytest.raises(MissingRealizationData):
        inventory_sensitivity(InventoryConfig(T=3, N=2))


@pytest.mark.filterwarnings("ignore:.*degenerate")
def test_sensitivity_report_end_to_end(tmp_path):
    spec, cfg, _ = ar_case()
    rep = inventory_sensitivity(cfg, n_sims=200, primal_iters=30)
    assert [r.param for r in rep.rows] == ["phi", "mu"]
    assert rep["mu"].delta == pytest.approx(1e-4 * spec.mu)
    rep.to_csv(tmp_path / "s.csv")
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0] == ["param", "fd", "estimate", "gap_percent", "n_sims", "delta"]
    assert float(rows[2][1]) == rep["mu"].fd


def test_gap_percent():
    row = SensitivityRow("mu", 2.0, Estimate(2.02, 0.01, 10), 10, 1e-4)
    assert row.gap_percent == pytest.approx(1.0)
    with pytest.raises(KeyError):
        SensitivityReport([row])["phi"]


@settings(max_examples=30, deadline=None)
@given(phi=st.floats(0.0, 0.95), sigma2=st.floats(0.0, 1.0), D0=st.floats(0.1, 50.0), t=st.integers(1, 30))
def test_memoryless_intercept_variance_closed_form(phi, sigma2, D0, t):
    mean, var = demand_moments(DemandProcessSpec(phi, 0.0, sigma2, D0, t), t)
    # expm1/log1p form of (1 + sigma2)^t - 1, free of cancellation for tiny sigma2
    closed = D0 ** 2 * phi ** (2 * t) * np.expm1(t * np.log1p(sigma2))
    assert mean == pytest.approx(D0 * phi ** t, rel=1e-12)
    assert var == pytest.approx(closed, rel=1e-12, abs=1e-300)


def test_mean_reverts_to_the_long_run_level():
    spec = DemandProcessSpec(0.6, 2.0, 0.25, 40.0, 200)
    mean, _ = demand_moments(spec, 200)
    assert mean == pytest.approx(2.0 / 0.4, rel=1e-12)
    with pytest.raises(ValueError):
        demand_moments(spec, 0)
