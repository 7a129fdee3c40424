"""Affine cut pools for polyhedral value-function models."""
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class Cut:
    """Affine function ``intercept + gradient @ state`` generated at ``iteration``."""

    stage: int
    intercept: float
    gradient: np.ndarray
    iteration: int

    def __call__(self, state):
        return self.intercept + float(self.gradient @ np.asarray(state, dtype=float))


class CutPool:
    """Growing set of cuts with max (``lower``) or min (``upper``) evaluation."""

    def __init__(self, dim, orientation="lower"):
        if orientation not in ("lower", "upper"):
            raise ValueError("orientation must be 'lower' or 'upper'")
        self.dim = dim
        self.orientation = orientation
        self.cuts = []
        self._keys = set()

    def __len__(self):
        return len(self.cuts)

    def __iter__(self):
        return iter(self.cuts)

    def add(self, cut):
        """Append ``cut``; exact duplicates are skipped and ``False`` returned."""
        g = np.asarray(cut.gradient, dtype=float)
        if g.shape != (self.dim,):
            raise ValueError(f"cut gradient has shape {g.shape}, expected ({self.dim},)")
        key = (float(cut.intercept), g.tobytes())
        if key in self._keys:
            return False
        self._keys.add(key)
        self.cuts.append(cut)
        return True

    def arrays(self):
        if not self.cuts:
            return np.zeros(0), np.zeros((0, self.dim))
        return (np.array([c.intercept for c in self.cuts]),
                np.array([c.gradient for c in self.cuts]))

    def evaluate(self, state):
        """Model value at ``state``; ties resolve to the earliest cut in :meth:`active`."""
        if not self.cuts:
            return -np.inf if self.orientation == "lower" else np.inf
        a, G = self.arrays()
        vals = a + G @ np.asarray(state, dtype=float)
        return float(vals.max() if self.orientation == "lower" else vals.min())

    def active(self, state):
        """Index of the cut attaining the model value (lowest iteration on ties)."""
        a, G = self.arrays()
        vals = a + G @ np.asarray(state, dtype=float)
        best = vals.max() if self.orientation == "lower" else vals.min()
        hits = np.flatnonzero(np.abs(vals - best) <= 1e-12 * (1 + abs(best)))
        return int(min(hits, key=lambda i: self.cuts[i].iteration))


class PolicyApprox:
    """Cut pools keyed by stage, or by ``(stage, key)`` for per-realization models."""

    def __init__(self, orientation):
        self.orientation = orientation
        self.pools = {}

    def pool(self, key, dim=None):
        if key not in self.pools:
            if dim is None:
                raise KeyError(key)
            self.pools[key] = CutPool(dim, self.orientation)
        return self.pools[key]

    def n_cuts(self):
        return sum(len(p) for p in self.pools.values())
