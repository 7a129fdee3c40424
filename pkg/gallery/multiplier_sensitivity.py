"""
Derivatives in the demand parameters from multipliers
=====================================================

Demand follows ``D_t = eps_t (phi D_{t-1} + mu)``. The optimal value depends on
``phi`` and ``mu`` only through the right-hand sides, so its derivatives are
expectations of multipliers times known coefficients. Compare them with
finite differences that reuse the same random numbers.

The finite differences are taken on the SDDP lower bound, so they inherit its
convergence error: with 60 primal iterations they are still 19% off for
``phi``, with 600 about 2%. The multiplier estimate settles much earlier.
"""

from mspduals.instances import DemandProcessSpec, InventoryConfig
from mspduals.sensitivity import inventory_sensitivity

cfg = InventoryConfig(T=6, N=20, demand=DemandProcessSpec(0.3, 1.0, 0.25, 10.0, 6), seed=11)
report = inventory_sensitivity(cfg, n_sims=2000, primal_iters=300, seed=1, sim_seed=5)

for name in ("phi", "mu"):
    r = report[name]
    print(f"d value / d {name:3s}: multipliers {r.estimate.value:10.5f} (se {r.estimate.stderr:.1e})   "
          f"finite differences {r.fd:10.5f}   gap {r.gap_percent:.3f}%")
