"""
Bracketing an inventory problem from both sides
===============================================

Primal SDDP gives a lower bound that is only statistically matched by an
upper bound. Dual SDDP builds cuts on the concave dual value functions, so its
first-stage value is a deterministic upper bound. Run both on a 10-stage
inventory problem and watch the bracket close.
"""

import numpy as np

from mspduals.dual import PenaltySchedule, run_dual_sddp_penalized
from mspduals.instances import InventoryConfig, make_inventory_instance
from mspduals.primal import run_primal_sddp

inst = make_inventory_instance(InventoryConfig(T=10, N=10, seed=0))

###############################################################################
# Primal side: stop when the one-sided confidence bound is within 1%.
primal = run_primal_sddp(inst, gap_tol=0.01, max_iters=300, seed=1)
print(f"primal: Lb = {primal.lower_bound:.4f} after {primal.iterations} iterations")

###############################################################################
# Dual side: a constant penalty of 1e3 on the coupling slacks. The upper bound
# sequence never increases.
dual = run_dual_sddp_penalized(inst, schedule=PenaltySchedule(1e3), max_iters=100,
                               lower_bound=primal.lower_bound, gap_tol=1e-4)
ub = np.array(dual.trace.ub)
for k in (0, 4, 9, 24, len(ub) - 1):
    if k < len(ub):
        print(f"  iteration {k + 1:3d}: Ub_dual = {ub[k]:.4f}")

gap = (dual.upper_bound - primal.lower_bound) / dual.upper_bound
print(f"bracket [{primal.lower_bound:.4f}, {dual.upper_bound:.4f}], relative width {gap:.2e}")
