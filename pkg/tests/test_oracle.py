import csv

import numpy as np
import pytest

from mspduals.instances import (
    DemandProcessSpec, InventoryConfig, ar_inventory_noise, make_ar_inventory_instance,
)
from mspduals.model import MslpInstance, StageRealization, dual_boxes, solve_deterministic_equivalent
from mspduals.oracle import (
    GridOutsideBox, OutOfRange, StateNotScalar, TabulatedValueFunction, evaluate_tabulated, solve_dual_dp,
)

from conftest import inventory


def test_interpolation_and_domain():
    fn = TabulatedValueFunction(1, [0.0, 1.0, 2.0], [-np.inf, 1.0, 3.0])
    assert evaluate_tabulated(fn, 1.5) == 2.0
    assert evaluate_tabulated(fn, 1.0) == 1.0
    assert evaluate_tabulated(fn, 0.5) == -np.inf
    with pytest.raises(OutOfRange):
        evaluate_tabulated(fn, 2.5)
    slope, icpt = fn.segments()
    assert slope == pytest.approx([2.0]) and icpt == pytest.approx([-1.0])


def test_grid_must_increase():
    with pytest.raises(ValueError):
        TabulatedValueFunction(1, [0.0, 0.0], [1.0, 1.0])


def test_vector_multipliers_rejected():
    cfg = InventoryConfig(T=3, N=2, demand=DemandProcessSpec(0.1, 1.0, 0.25, 10.0, 3))
    with pytest.raises(StateNotScalar):
        solve_dual_dp(make_ar_inventory_instance(cfg, ar_inventory_noise(cfg)), grid_spec=5)


def test_grid_outside_box_rejected():
    inst = inventory(2, 2)
    box = dual_boxes(inst)
    grids = [np.linspace(box.lower[t][0] - 1.0, box.upper[t][0], 5) for t in range(2)]
    with pytest.raises(GridOutsideBox):
        solve_dual_dp(inst, grid_spec=grids, boxes=box)


def test_single_stage_value_is_the_lp():
    inst = MslpInstance(((StageRealization([[1.0]], None, [2.0], [3.0], 1.0),),))
    res = solve_dual_dp(inst, grid_spec=11)
    assert res.first_stage_value == pytest.approx(6.0) and res.first_stage_pi == pytest.approx(2.0)


def test_grid_through_optimal_multiplier_recovers_the_optimum():
    inst = inventory(2, 4, seed=3)
    value, sol, idx = solve_deterministic_equivalent(inst)
    pi0 = idx.node_duals(sol.duals)[0][0]
    box = dual_boxes(inst)
    g0 = np.union1d(np.linspace(box.lower[0][0], box.upper[0][0], 51), [pi0])
    g1 = np.linspace(box.lower[1][0], box.upper[1][0], 51)
    res = solve_dual_dp(inst, grid_spec=[g0, g1], boxes=box)
    assert res.first_stage_value == pytest.approx(value, rel=1e-9)


def test_coarse_grid_underestimates():
    inst = inventory(3, 3, seed=1)
    value, _, _ = solve_deterministic_equivalent(inst)
    coarse = solve_dual_dp(inst, grid_spec=21).first_stage_value
    fine = solve_dual_dp(inst, grid_spec=201).first_stage_value
    assert coarse <= value + 1e-9 and fine <= value + 1e-9
    assert fine == pytest.approx(value, rel=1e-3)


def test_penalty_relaxes_the_value_function():
    inst = inventory(3, 3, seed=2)
    exact = solve_dual_dp(inst, grid_spec=81).functions[0].values
    prev = None
    for g in (1.0, 10.0, 1e4):
        v = solve_dual_dp(inst, grid_spec=81, gamma=g).functions[0].values
        assert np.all(v >= exact - 1e-9 * (1 + np.abs(exact)))
        if prev is not None:
            assert np.all(prev >= v - 1e-9 * (1 + np.abs(v)))
        prev = v


def test_table_csv(tmp_path):
    fn = TabulatedValueFunction(1, [0.0, 0.1], [-np.inf, 0.30000000000000004])
    fn.to_csv(tmp_path / "v.csv")
    rows = list(csv.reader(open(tmp_path / "v.csv")))
    assert rows[0] == ["pi", "value"] and rows[1][1] == "-inf"
    assert float(rows[2][1]) == 0.30000000000000004
