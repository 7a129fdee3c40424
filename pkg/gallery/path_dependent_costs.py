"""
Costs that remember their past
==============================

When ordering costs follow ``c_t = eps_t (Phi c_{t-1} + mu)``, the cost path
becomes part of the dual state. Build the augmented dual and check it against
the extensive form with every node's cost computed along its path.
"""

import numpy as np

from mspduals.dual import PenaltySchedule, build_interstage_cost_dual, run_dual_sddp
from mspduals.instances import CostProcessSpec, InventoryConfig, make_cost_ar_instance, make_inventory_instance
from mspduals.model import enumerate_tree, solve_deterministic_equivalent

T = 4
base = make_inventory_instance(InventoryConfig(T=T, N=2, seed=4))
a0 = base.stages[0][0].c
Phi = [()] + [(np.diag([0.6, 0.0, 0.0]),)] * (T - 1)
mu = [np.zeros(3)] + [np.array([0.8, 0.2, 2.8])] * (T - 1)
support = [((np.ones(3), 1.0),)] + [((np.array([0.7, 1.0, 1.0]), 0.5),
                                     (np.array([1.3, 1.0, 1.0]), 0.5))] * (T - 1)
model = make_cost_ar_instance(base, CostProcessSpec(1, tuple(Phi), tuple(mu), (a0,), tuple(support)))

costs = model.node_costs(enumerate_tree(base))
value, _, _ = solve_deterministic_equivalent(base, cost_override=lambda k: costs[k])

res = run_dual_sddp(build_interstage_cost_dual(model), PenaltySchedule(1e3), max_iters=200,
                    lower_bound=value, gap_tol=1e-8)
print(f"extensive form {value:.8f}")
print(f"augmented dual {res.upper_bound:.8f} after {res.iterations} iterations")
