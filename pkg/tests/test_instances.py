import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mspduals.instances import (
    CostProcessSpec, DemandProcessSpec, InvalidCosts, InvalidProcess, InventoryConfig, ParseError,
    ar_inventory_noise, instance_from_dict, instance_to_dict, inventory_config_from_dict,
    inventory_config_to_dict, load_hydro_fixture, load_instance, make_ar_inventory_instance,
    make_cost_ar_instance, make_inventory_instance, make_random_instance, ordering_cost,
    sample_demand_path, save_instance,
)
from mspduals.lp import LpProblem, Status, solve_lp
from mspduals.model import (
    MslpInstance, StageRealization, enumerate_tree, solve_deterministic_equivalent, validate_instance,
)
from mspduals.primal import run_primal_sddp
from mspduals.sensitivity import demand_moments


def test_default_costs_follow_the_seasonal_curve():
    a, g, h = InventoryConfig(T=12, N=1).costs()
    assert a[0] == pytest.approx(1.5 + np.cos(np.pi / 6))
    assert a[5] == pytest.approx(0.5)
    assert np.all(g == 2.8) and np.all(h == 0.2)
    assert ordering_cost(3) == pytest.approx(1.5)


@pytest.mark.parametrize("x0,d", [(10.0, 14.0), (2.0, 7.5)])
def test_single_period_orders_the_shortfall(x0, d):
    inst = make_inventory_instance(InventoryConfig(T=1, N=1, x0=x0), demands=[[d]])
    value, sol, _ = solve_deterministic_equivalent(inst)
    a = 1.5 + np.cos(np.pi / 6)
    # a < g, so the cheapest plan orders exactly d - x0
    assert value == pytest.approx(a * (d - x0))
    assert sol.primal[0] == pytest.approx(d - x0)


def test_zero_demand_only_pays_holding():
    inst = make_inventory_instance(InventoryConfig(T=2, N=1, x0=10.0), demands=[[0.0], [0.0]])
    value, _, _ = solve_deterministic_equivalent(inst)
    assert value == pytest.approx(0.2 * 10 * 2)


@pytest.mark.parametrize("kw", [dict(g=1.0), dict(h=0.0), dict(a=-1.0)])
def test_cost_assumptions_enforced(kw):
    with pytest.raises(InvalidCosts):
        make_inventory_instance(InventoryConfig(T=2, N=2, **kw))


def test_inventory_randomness_is_demand_only():
    inst = make_inventory_instance(InventoryConfig(T=4, N=5, seed=3))
    assert validate_instance(inst) == []
    assert inst.N(0) == 1
    for t in range(1, 4):
        assert inst.random_parts(t) == {"b"}


def test_inventory_demands_follow_the_discretization():
    cfg = InventoryConfig(T=3, N=4, seed=9)
    inst = make_inventory_instance(cfg)
    rng = np.random.default_rng(9)
    for t in range(3):
        z = rng.standard_normal(1 if t == 0 else 4)
        d = (5 + 0.5 * (t + 1)) * (1.5 + 0.1 * z)
        got = [r.b[0] for r in inst.stages[t]]
        if t == 0:
            got = [got[0] + cfg.x0]
        assert got == pytest.approx(d)


def test_inventory_has_complete_recourse():
    # random nonnegative prices stand in for arbitrary policies
    inst = make_inventory_instance(InventoryConfig(T=3, N=4, seed=2))
    rng = np.random.default_rng(0)
    for _ in range(1000):
        t = int(rng.integers(1, 3))
        r = inst.stages[t][int(rng.integers(4))]
        state = rng.uniform(0, 30, size=3)
        sol = solve_lp(LpProblem(rng.uniform(0, 1, 3), r.A, ["="], r.b - r.B @ state))
        assert sol.status is Status.OPTIMAL


def test_deterministic_noise_gives_the_recursion():
    spec = DemandProcessSpec(0.5, 2.0, 0.0, 4.0, 6)
    D, eps = sample_demand_path(spec, seed=1)
    expect, d = [], 4.0
    for _ in range(6):
        d = 0.5 * d + 2.0
        expect.append(d)
    assert np.all(eps == 1.0) and D == pytest.approx(expect)


def test_demand_is_positive():
    spec = DemandProcessSpec(0.3, 0.1, 2.0, 1.0, 10)
    D, _ = sample_demand_path(spec, seed=5, n_paths=100_000)
    assert D.size == 10**6 and np.all(D > 0)


def test_noise_has_unit_mean_and_given_variance():
    spec = DemandProcessSpec(0.1, 1.0, 0.25, 10.0, 1)
    e = spec.sample_noise(np.random.default_rng(0), 400_000)
    se = e.std() / np.sqrt(e.size)
    assert abs(e.mean() - 1.0) < 4 * se
    assert e.var() == pytest.approx(0.25, rel=0.02)


def test_sample_means_match_moment_recursion():
    spec = DemandProcessSpec(0.6, 1.0, 0.25, 10.0, 20)
    D, _ = sample_demand_path(spec, seed=3, n_paths=100_000)
    for t in range(1, 21):
        mean, _ = demand_moments(spec, t)
        se = D[:, t - 1].std(ddof=1) / np.sqrt(D.shape[0])
        assert abs(D[:, t - 1].mean() - mean) < 4 * se


def test_bad_process_rejected():
    with pytest.raises(InvalidProcess):
        DemandProcessSpec(1.2, 1.0, 0.1, 1.0, 5)
    with pytest.raises(InvalidProcess):
        DemandProcessSpec(0.5, -1.0, 0.1, 1.0, 5)


def test_ar_inventory_demand_row_encodes_the_recursion():
    spec = DemandProcessSpec(0.2, 3.0, 0.25, 10.0, 4)
    cfg = InventoryConfig(T=4, N=3, demand=spec, seed=1)
    noise = ar_inventory_noise(cfg)
    inst = make_ar_inventory_instance(cfg, noise)
    assert validate_instance(inst) == []
    value, sol, idx = solve_deterministic_equivalent(inst)
    # the demand columns along every node reproduce D_t = eps (phi D_{t-1} + mu)
    demand = {}
    for k in range(len(idx)):
        x = sol.primal[idx.cols(k)]
        t, j, par = idx.stage[k], idx.realization[k], idx.parent[k]
        prev = demand[par] if par >= 0 else spec.D0
        demand[k] = x[3] - x[4]
        assert demand[k] == pytest.approx(noise[t][j] * (spec.phi * prev + spec.mu), rel=1e-9)


# ---------------------------------------------------------------- cost process


def scalar_base(T=3, N=2):
    stages = [(StageRealization([[1.0, -1.0]], None, [1.0, 0.0], [2.0], 1.0),)]
    for t in range(1, T):
        stages.append(tuple(StageRealization([[1.0, -1.0]], [[0.0, 1.0]], [1.0, 0.0], [2.0 + j], 1.0 / N)
                            for j in range(N)))
    return MslpInstance(tuple(stages))


def scalar_cost_spec(T, phi, eps=((0.8, 0.5), (1.25, 0.5)), mu=0.5):
    Phi = [()] + [(np.diag([phi, 0.0]),) for _ in range(1, T)]
    return CostProcessSpec(1, tuple(Phi), tuple([np.zeros(2)] + [np.array([mu, 0.0])] * (T - 1)),
                           (np.array([1.0, 0.0]),),
                           tuple([((np.ones(2), 1.0),)] + [tuple((np.full(2, e), p) for e, p in eps)] * (T - 1)))


def test_memoryless_costs_equal_plain_instance():
    base = scalar_base()
    model = make_cost_ar_instance(base, scalar_cost_spec(3, 0.0))
    plain = MslpInstance(tuple(
        base.stages[0] if t == 0 else tuple(
            StageRealization(r.A, r.B, model.spec.support[t][j][0] * np.array([0.5, 0.0]), r.b, r.p)
            for j, r in enumerate(base.stages[t]))
        for t in range(3)))
    v_plain, _, _ = solve_deterministic_equivalent(plain)
    idx = enumerate_tree(base)
    costs = model.node_costs(idx)
    v_path, _, _ = solve_deterministic_equivalent(base, cost_override=lambda k: costs[k])
    assert v_path == pytest.approx(v_plain, rel=1e-12)


def test_cost_paths_follow_the_recursion_by_hand():
    base = scalar_base(T=3)
    model = make_cost_ar_instance(base, scalar_cost_spec(3, 0.7))
    idx = enumerate_tree(base)
    costs = model.node_costs(idx)
    eps = [0.8, 1.25]
    for k in range(len(idx)):
        path = idx.path(k)
        c = 1.0
        for t in range(1, len(path)):
            c = eps[path[t]] * (0.7 * c + 0.5)
        assert costs[k][0] == pytest.approx(c, rel=1e-15)


@settings(max_examples=25, deadline=None)
@given(phi=st.floats(0, 2), e=st.lists(st.floats(0.01, 3), min_size=2, max_size=2), mu=st.floats(0.01, 2))
def test_nonnegative_memory_keeps_costs_positive(phi, e, mu):
    base = scalar_base(T=4)
    spec = scalar_cost_spec(4, phi, eps=((e[0], 0.5), (e[1], 0.5)), mu=mu)
    costs = make_cost_ar_instance(base, spec).node_costs(enumerate_tree(base))
    assert all(c[0] > 0 for c in costs)


def test_cost_process_rejects_nonpositive_noise():
    with pytest.raises(InvalidProcess):
        make_cost_ar_instance(scalar_base(), scalar_cost_spec(3, 0.5, eps=((0.0, 0.5), (1.0, 0.5))))


# ---------------------------------------------------------------- file format


def test_save_load_round_trip(tmp_path):
    inst = make_random_instance(3, 2, seed=8)
    path = tmp_path / "inst.json"
    save_instance(inst, path)
    back = load_instance(path)
    for t in range(inst.T):
        for r, s in zip(inst.stages[t], back.stages[t]):
            for name in ("A", "B", "c", "b"):
                assert np.array_equal(getattr(r, name), getattr(s, name))
            assert r.p == s.p


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=4, max_size=4))
def test_decimal_values_round_trip_exactly(vals):
    inst = MslpInstance(((StageRealization([[vals[0], vals[1]]], None, [vals[2], 1.0], [vals[3]], 1.0),),))
    back = instance_from_dict(json.loads(json.dumps(instance_to_dict(inst))))
    r, s = inst.stages[0][0], back.stages[0][0]
    assert r.A.tobytes() == s.A.tobytes() and r.c.tobytes() == s.c.tobytes() and r.b.tobytes() == s.b.tobytes()


def test_missing_horizon_names_the_field():
    data = instance_to_dict(make_random_instance(2, 2, 0))
    del data["horizon"]
    with pytest.raises(ParseError) as err:
        instance_from_dict(data)
    assert err.value.field == "horizon"


def test_unknown_field_rejected():
    data = instance_to_dict(make_random_instance(2, 2, 0))
    data["stages"][1]["realizations"][0]["q"] = 1
    with pytest.raises(ParseError) as err:
        instance_from_dict(data)
    assert err.value.field == "q"


def test_syntax_error_reports_line(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n "horizon": 1,\n "stages": [\n}')
    with pytest.raises(ParseError) as err:
        load_instance(path)
    assert err.value.line == 4


def test_generator_record_round_trip():
    cfg = InventoryConfig(T=5, N=3, demand=DemandProcessSpec(0.01, 0.1, 0.25, 10.0, 5), seed=4)
    back = inventory_config_from_dict(json.loads(json.dumps(inventory_config_to_dict(cfg))))
    assert back == cfg


def test_hydro_fixture_validates_and_solves():
    inst = load_hydro_fixture()
    assert validate_instance(inst) == []
    assert (inst.T, inst.N(1)) == (12, 5)
    res = run_primal_sddp(inst, max_iters=5, gap_tol=-np.inf, seed=0)
    assert np.isfinite(res.lower_bound) and res.iterations == 5
    assert all(b >= a - 1e-9 for a, b in zip(res.trace.lb, res.trace.lb[1:]))
