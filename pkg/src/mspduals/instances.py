"""Instance generators and the JSON instance format.

The inventory model orders ``o_t >= 0`` on top of the inherited stock
``x_{t-1}`` and pays ordering cost ``a_t``, holding cost ``h_t`` on surplus
and back-order cost ``g_t`` on shortage. Each stage has variables
``(order, surplus, shortage)`` and the single balance row

    order - surplus + shortage + (surplus_{t-1} - shortage_{t-1}) = demand_t,

so the stock carried into the next stage is ``surplus - shortage`` and the
dual state is scalar.
"""
from dataclasses import dataclass
import json
import logging
import math

import numpy as np

from .model import MslpInstance, StageRealization

log = logging.getLogger(__name__)

DEMAND_FLOOR = 1e-6


class InvalidCosts(ValueError):
    pass


class InvalidProcess(ValueError):
    pass


class ParseError(ValueError):
    """Malformed instance file; ``field`` names the offending entry."""

    def __init__(self, message, field=None, line=None):
        where = []
        if field is not None:
            where.append(f"field {field!r}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.field = field
        self.line = line


# ------------------------------------------------------------------ demand


@dataclass(frozen=True)
class DemandProcessSpec:
    """Multiplicative autoregressive demand ``D_t = eps_t (phi D_{t-1} + mu)``.

    ``eps_t`` is log-normal with mean 1 and variance ``sigma2``; ``sigma2 = 0``
    means ``eps_t = 1``.
    """

    phi: float
    mu: float
    sigma2: float
    D0: float
    T: int

    def __post_init__(self):
        if not 0.0 <= self.phi < 1.0:
            raise InvalidProcess(f"phi={self.phi} outside [0, 1)")
        if self.mu < 0 or self.D0 < 0 or self.sigma2 < 0:
            raise InvalidProcess("mu, D0 and sigma2 must be nonnegative")
        if self.T < 1:
            raise InvalidProcess("T must be at least 1")

    @property
    def log_params(self):
        """Mean and standard deviation of ``log eps``."""
        s2 = math.log1p(self.sigma2)
        return -s2 / 2, math.sqrt(s2)

    def sample_noise(self, rng, size):
        if self.sigma2 == 0:
            return np.ones(size)
        m, s = self.log_params
        return np.exp(rng.normal(m, s, size=size))


def sample_demand_path(spec, seed, n_paths=None):
    """Draw demand paths; returns ``(D, eps)`` with shape ``(T,)`` or ``(n_paths, T)``.

    Stage 1 uses noise like every other stage here; instance builders that
    need a deterministic first stage handle that themselves.
    """
    rng = np.random.default_rng(seed)
    shape = (spec.T,) if n_paths is None else (n_paths, spec.T)
    eps = spec.sample_noise(rng, shape)
    D = np.empty(shape)
    prev = np.full(shape[:-1], float(spec.D0))
    for t in range(spec.T):
        prev = eps[..., t] * (spec.phi * prev + spec.mu)
        D[..., t] = prev
    return D, eps


# --------------------------------------------------------------- inventory


def ordering_cost(t):
    """Default ordering cost at one-based period ``t``."""
    return 1.5 + math.cos(math.pi * t / 6)


@dataclass(frozen=True)
class InventoryConfig:
    """Inventory problem settings.

    Cost fields accept a scalar or a length-``T`` sequence; ``a=None`` uses
    ``1.5 + cos(pi t / 6)`` for one-based period ``t``. With ``demand=None``
    the stage-``t`` demand realizations are ``(5 + 0.5 t)(1.5 + 0.1 z)`` with
    standard normal ``z``; a :class:`DemandProcessSpec` switches to the
    autoregressive model with demand carried as a state.
    """

    T: int
    N: int
    a: object = None
    g: object = 2.8
    h: object = 0.2
    x0: float = 10.0
    demand: DemandProcessSpec = None
    seed: int = 0

    def costs(self):
        T = self.T
        a = np.array([ordering_cost(t + 1) for t in range(T)]) if self.a is None else _broadcast(self.a, T)
        return a, _broadcast(self.g, T), _broadcast(self.h, T)


def _broadcast(v, T):
    arr = np.asarray(v, dtype=float)
    return np.full(T, float(arr)) if arr.ndim == 0 else arr.reshape(T)


def _check_costs(a, g, h):
    if np.any(g <= a) or np.any(a < 0):
        raise InvalidCosts("need g_t > a_t >= 0 at every stage")
    if np.any(h <= 0):
        raise InvalidCosts("holding cost must be positive")


def inventory_demands(config):
    """Demand support per stage; stage 1 gets one draw."""
    rng = np.random.default_rng(config.seed)
    out = []
    for t in range(config.T):
        n = 1 if t == 0 else config.N
        z = rng.standard_normal(n)
        d = (5 + 0.5 * (t + 1)) * (1.5 + 0.1 * z)
        if np.any(d < DEMAND_FLOOR):
            log.warning("clamping %d negative demand draws at stage %d", int(np.sum(d < DEMAND_FLOOR)), t)
            d = np.maximum(d, DEMAND_FLOOR)
        out.append(d)
    return out


def make_inventory_instance(config=None, demands=None, **kwargs):
    """Inventory problem as an MSLP.

    Parameters
    ----------
    config : InventoryConfig, optional
        Built from ``kwargs`` when omitted.
    demands : list of arrays, optional
        Explicit demand support per stage, overriding the generated one
        (stage 0 must have a single value).
    """
    config = config or InventoryConfig(**kwargs)
    a, g, h = config.costs()
    _check_costs(a, g, h)
    if config.demand is not None:
        return _make_ar_inventory(config, a, g, h)
    if demands is None:
        demands = inventory_demands(config)
    A = np.array([[1.0, -1.0, 1.0]])
    B = np.array([[0.0, 1.0, -1.0]])
    stages = []
    for t, dt in enumerate(demands):
        dt = np.atleast_1d(np.asarray(dt, dtype=float))
        c = np.array([a[t], h[t], g[t]])
        p = 1.0 / dt.size
        if t == 0:
            stages.append((StageRealization(A, np.zeros((1, 0)), c, [dt[0] - config.x0], 1.0),))
        else:
            stages.append(tuple(StageRealization(A, B, c, [d], p) for d in dt))
    flags = [frozenset()] + [frozenset({"b"})] * (len(stages) - 1)
    return MslpInstance(tuple(stages), tuple(flags), name=f"inventory-T{config.T}-N{config.N}")


# columns of the autoregressive-demand stage: order, surplus, shortage, demand+, demand-
AR_COLUMNS = ("order", "surplus", "shortage", "demand_pos", "demand_neg")
DEMAND_ROW = 1


def ar_inventory_noise(config):
    """Noise support per stage (the first stage gets the single draw 1)."""
    spec = config.demand
    if spec is None:
        raise InvalidProcess("autoregressive inventory needs a demand process")
    rng = np.random.default_rng(config.seed)
    return [np.ones(1)] + [spec.sample_noise(rng, config.N) for _ in range(1, config.T)]


def _make_ar_inventory(config, a, g, h, noise=None):
    spec = config.demand
    if spec.T != config.T:
        raise InvalidProcess("demand process horizon differs from the inventory horizon")
    noise = ar_inventory_noise(config) if noise is None else noise
    A = np.array([[1.0, -1.0, 1.0, -1.0, 1.0],
                  [0.0, 0.0, 0.0, 1.0, -1.0]])
    stages = []
    for t in range(config.T):
        c = np.array([a[t], h[t], g[t], 0.0, 0.0])
        if t == 0:
            b = [-config.x0, spec.phi * spec.D0 + spec.mu]
            stages.append((StageRealization(A, np.zeros((2, 0)), c, b, 1.0),))
            continue
        reals = []
        for e in noise[t]:
            B = np.array([[0.0, 1.0, -1.0, 0.0, 0.0],
                          [0.0, 0.0, 0.0, -e * spec.phi, e * spec.phi]])
            reals.append(StageRealization(A, B, c, [0.0, e * spec.mu], 1.0 / len(noise[t])))
        stages.append(tuple(reals))
    flags = [frozenset()] + [frozenset({"b", "B"})] * (config.T - 1)
    return MslpInstance(tuple(stages), tuple(flags), name=f"inventory-ar-T{config.T}-N{config.N}")


def make_ar_inventory_instance(config, noise=None):
    """Autoregressive-demand inventory instance with an explicit noise support."""
    a, g, h = config.costs()
    _check_costs(a, g, h)
    return _make_ar_inventory(config, a, g, h, noise)


# ------------------------------------------------------- random test problems


def make_random_instance(T, N, seed, n_ctrl=2, m=2, random_costs=False, random_recourse=False,
                         slack_cost=(5.0, 15.0)):
    """Random instance with relatively complete recourse.

    Every stage has ``n_ctrl`` priced controls plus ``m`` surplus and ``m``
    shortage columns (``A = [G, I, -I]``), so any state admits a feasible
    continuation. ``B`` and ``b`` always vary; ``random_costs`` and
    ``random_recourse`` also vary ``c`` and ``G``.
    """
    rng = np.random.default_rng(seed)
    n = n_ctrl + 2 * m
    stages = []
    for t in range(T):
        Nt = 1 if t == 0 else N
        p = rng.dirichlet(np.full(Nt, 3.0)) if Nt > 1 else np.ones(1)
        G0 = rng.uniform(-1, 2, size=(m, n_ctrl))
        c0 = np.r_[rng.uniform(1, 5, n_ctrl), rng.uniform(*slack_cost, 2 * m)]
        reals = []
        for j in range(Nt):
            G = G0 + (rng.uniform(-0.5, 0.5, size=G0.shape) if random_recourse else 0.0)
            c = c0 * (rng.uniform(0.7, 1.3, n) if random_costs else 1.0)
            A = np.hstack([G, np.eye(m), -np.eye(m)])
            B = rng.uniform(-1, 1, size=(m, n if t else 0)) * (rng.random((m, n if t else 0)) < 0.6)
            b = rng.uniform(0, 10, size=m)
            reals.append(StageRealization(A, B, c, b, p[j]))
        stages.append(tuple(reals))
    return MslpInstance(tuple(stages), name=f"random-T{T}-N{N}-s{seed}")


# ------------------------------------------------------------ hydro-thermal


def make_hydro_instance(T=12, N=5, seed=2024, n_reservoirs=4, n_thermal=4):
    """Small hydro-thermal scheduling instance.

    Per stage and reservoir: volume, turbined outflow, spill, plus upper-bound
    slacks; thermal units with capacity slacks and an unpriced-energy deficit
    column. Rows are reservoir balances (inflows random), one demand row and
    capacity rows. Spill and deficit keep every stage feasible.
    """
    rng = np.random.default_rng(seed)
    R, G = n_reservoirs, n_thermal
    vmax = rng.uniform(80, 200, R)
    umax = rng.uniform(30, 60, R)
    gmax = rng.uniform(20, 50, G)
    gcost = np.sort(rng.uniform(10, 80, G))
    deficit_cost = 500.0
    v0 = 0.5 * vmax
    inflow_mean = rng.uniform(10, 30, R)
    # columns: v(R) u(R) s(R) g(G) deficit(1) vslack(R) uslack(R) gslack(G)
    n = 3 * R + G + 1 + R + R + G
    iv, iu, isp = np.arange(R), R + np.arange(R), 2 * R + np.arange(R)
    ig = 3 * R + np.arange(G)
    idef = 3 * R + G
    ivs, ius = idef + 1 + np.arange(R), idef + 1 + R + np.arange(R)
    igs = idef + 1 + 2 * R + np.arange(G)
    m = R + 1 + R + R + G
    A = np.zeros((m, n))
    B = np.zeros((m, n))
    for i in range(R):
        A[i, [iv[i], iu[i], isp[i]]] = [1, 1, 1]
        B[i, iv[i]] = -1
        A[R + 1 + i, [iv[i], ivs[i]]] = 1
        A[2 * R + 1 + i, [iu[i], ius[i]]] = 1
    A[R, iu] = 1
    A[R, ig] = 1
    A[R, idef] = 1
    for k in range(G):
        A[3 * R + 1 + k, [ig[k], igs[k]]] = 1
    c = np.zeros(n)
    c[ig] = gcost
    c[idef] = deficit_cost
    c[isp] = 0.01
    stages = []
    for t in range(T):
        season = 1 + 0.4 * math.sin(2 * math.pi * t / 12)
        demand = 0.9 * (umax.sum() + gmax.sum()) * (0.6 + 0.1 * math.cos(2 * math.pi * t / 12))
        Nt = 1 if t == 0 else N
        reals = []
        for _ in range(Nt):
            inflow = inflow_mean * season * rng.lognormal(-0.08, 0.4, R)
            b = np.concatenate([inflow + (v0 if t == 0 else 0.0), [demand], vmax, umax, gmax])
            reals.append(StageRealization(A, B if t else np.zeros((m, 0)), c, b, 1.0 / Nt))
        stages.append(tuple(reals))
    return MslpInstance(tuple(stages), name=f"hydro-R{R}-T{T}-N{N}")


# ------------------------------------------------------------ cost process


@dataclass(frozen=True, eq=False)
class CostProcessSpec:
    """Multiplicative vector autoregression for stage costs.

    ``c_t = eps_t * (sum_l Phi[t][l] @ c_{t-1-l} + mu[t])`` for stages
    ``t >= 1``; stage 0 uses ``initial[0]`` and ``initial[l]`` is the cost
    ``l`` stages before it. ``support[t]`` lists ``(eps, p)`` pairs aligned with
    the base instance's realizations at stage ``t`` (joint with ``b``).
    """

    lag: int
    Phi: tuple
    mu: tuple
    initial: tuple
    support: tuple

    def __post_init__(self):
        object.__setattr__(self, "Phi", tuple(tuple(np.atleast_2d(np.asarray(P, float)) for P in Pt)
                                              for Pt in self.Phi))
        object.__setattr__(self, "mu", tuple(np.atleast_1d(np.asarray(v, float)) for v in self.mu))
        object.__setattr__(self, "initial", tuple(np.atleast_1d(np.asarray(v, float)) for v in self.initial))
        object.__setattr__(self, "support", tuple(tuple((np.atleast_1d(np.asarray(e, float)), float(p))
                                                        for e, p in st) for st in self.support))


@dataclass(frozen=True, eq=False)
class CostArModel:
    base: MslpInstance
    spec: CostProcessSpec

    @property
    def T(self):
        return self.base.T

    def stage_cost(self, t, j, history):
        """Cost at stage ``t`` for realization ``j`` given ``history = (c_{t-1}, ..., c_{t-p})``."""
        if t == 0:
            return self.spec.initial[0]
        eps, _ = self.spec.support[t][j]
        trend = sum(P @ h for P, h in zip(self.spec.Phi[t], history)) + self.spec.mu[t]
        return eps * trend

    def initial_history(self):
        """``(c_0, c_{-1}, ..., c_{1-p})`` seen by stage 1."""
        return tuple(self.spec.initial[:self.spec.lag])

    def node_costs(self, idx):
        """Cost vector of every scenario-tree node, by running the recursion along each path."""
        hist = {}
        out = []
        for k in range(len(idx)):
            t, j, par = idx.stage[k], idx.realization[k], idx.parent[k]
            past = hist[par] if par >= 0 else self.initial_history()
            c = self.stage_cost(t, j, past)
            out.append(c)
            hist[k] = (c,) + tuple(past[:self.spec.lag - 1])
        return out

    def cost_intervals(self):
        """Componentwise bounds ``(lo, hi)`` on the stage costs over all paths,
        with per-realization upper bounds ``hi_by_realization[t][j]``."""
        spec = self.spec
        init = list(spec.initial[:spec.lag])
        lo_hist, hi_hist = list(init), list(init)
        bounds, per_real = [], []
        for t in range(self.T):
            if t == 0:
                lo = hi = spec.initial[0]
                reals_hi = [hi]
            else:
                tr_lo, tr_hi = spec.mu[t].copy(), spec.mu[t].copy()
                for P, a, b in zip(spec.Phi[t], lo_hist, hi_hist):
                    Pp, Pn = np.maximum(P, 0), np.minimum(P, 0)
                    tr_lo = tr_lo + Pp @ a + Pn @ b
                    tr_hi = tr_hi + Pp @ b + Pn @ a
                reals_lo = [e * tr_lo for e, _ in spec.support[t]]
                reals_hi = [e * tr_hi for e, _ in spec.support[t]]
                lo, hi = np.min(reals_lo, axis=0), np.max(reals_hi, axis=0)
            bounds.append((lo, hi))
            per_real.append(reals_hi)
            lo_hist = [lo] + lo_hist[:spec.lag - 1]
            hi_hist = [hi] + hi_hist[:spec.lag - 1]
        return bounds, per_real

    def envelope_instance(self):
        """Plain instance whose costs dominate every path's costs realization-wise.

        Its dual feasible set contains every dual feasible multiplier of the
        path-dependent problem, so boxes computed on it stay valid.
        """
        _, per_real = self.cost_intervals()
        stages = []
        for t in range(self.T):
            stages.append(tuple(StageRealization(r.A, r.B, per_real[t][j if t else 0], r.b, r.p)
                                for j, r in enumerate(self.base.stages[t])))
        return MslpInstance(tuple(stages), name=f"{self.base.name}-cost-envelope")


def make_cost_ar_instance(base, spec):
    """Package a base instance with an autoregressive cost process."""
    if spec.lag < 1:
        raise InvalidProcess("lag must be at least 1")
    if len(spec.initial) < spec.lag:
        raise InvalidProcess(f"need {spec.lag} initial cost vectors, got {len(spec.initial)}")
    if len(spec.Phi) != base.T or len(spec.mu) != base.T or len(spec.support) != base.T:
        raise InvalidProcess("process data must cover every stage")
    if base.N(0) != 1:
        raise InvalidProcess("first stage must be deterministic")
    for t in range(base.T):
        rp = base.random_parts(t)
        if {"A", "B"} & rp:
            raise InvalidProcess(f"stage {t}: A and B must be deterministic")
        if t == 0:
            continue
        n = base.n(t)
        if len(spec.Phi[t]) != spec.lag:
            raise InvalidProcess(f"stage {t}: expected {spec.lag} autoregressive matrices")
        for l, P in enumerate(spec.Phi[t]):
            s = t - 1 - l
            cols = base.n(s) if s >= 0 else spec.initial[-s].size
            if P.shape != (n, cols):
                raise InvalidProcess(f"stage {t}: autoregressive matrix {l} has shape {P.shape}")
        if len(spec.support[t]) != base.N(t):
            raise InvalidProcess(f"stage {t}: noise support must align with realizations")
        for (e, p), r in zip(spec.support[t], base.stages[t]):
            if np.any(e <= 0):
                raise InvalidProcess(f"stage {t}: noise support must be strictly positive")
            if abs(p - r.p) > 1e-12:
                raise InvalidProcess(f"stage {t}: noise probabilities differ from the base instance")
    return CostArModel(base, spec)


# --------------------------------------------------------------- JSON format

_TOP = {"horizon", "stages", "name", "generator"}
_STAGE = {"n", "m", "realizations"}
_REAL = {"p", "A", "B", "c", "b"}


def instance_to_dict(instance, generator=None):
    """Plain-data form of ``instance``; ``generator`` is an optional dict of
    the settings that produced it, stored verbatim."""
    stages = []
    for t in range(instance.T):
        reals = [{"p": r.p, "A": r.A.tolist(), "B": r.B.tolist(), "c": r.c.tolist(), "b": r.b.tolist()}
                 for r in instance.stages[t]]
        stages.append({"n": instance.n(t), "m": instance.m(t), "realizations": reals})
    out = {"horizon": instance.T, "stages": stages}
    if instance.name:
        out["name"] = instance.name
    if generator is not None:
        out["generator"] = generator
    return out


def save_instance(instance, path, indent=1, generator=None):
    """Write ``instance`` as JSON; floats use the shortest exact representation."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(instance_to_dict(instance, generator), fh, indent=indent)
        fh.write("\n")


def _require(obj, keys, allowed, where):
    if not isinstance(obj, dict):
        raise ParseError(f"{where} must be an object", field=where)
    for k in keys:
        if k not in obj:
            raise ParseError(f"missing required field in {where}", field=k)
    for k in obj:
        if k not in allowed:
            raise ParseError(f"unknown field in {where}", field=k)


def _matrix(value, rows, cols, fld):
    arr = np.asarray(value, dtype=float)
    if rows == 0 or cols == 0:
        if arr.size:
            raise ParseError(f"expected an empty {rows}x{cols} matrix", field=fld)
        return np.zeros((rows, cols))
    if arr.shape != (rows, cols):
        raise ParseError(f"expected shape {(rows, cols)}, got {arr.shape}", field=fld)
    return arr


def instance_from_dict(data):
    _require(data, ("horizon", "stages"), _TOP, "instance")
    stages = data["stages"]
    if not isinstance(data["horizon"], int) or data["horizon"] != len(stages):
        raise ParseError("horizon must equal the number of stages", field="horizon")
    out = []
    n_prev = 0
    for t, st in enumerate(stages):
        where = f"stages[{t}]"
        _require(st, _STAGE, _STAGE, where)
        n, m = st["n"], st["m"]
        reals = []
        for j, r in enumerate(st["realizations"]):
            w = f"{where}.realizations[{j}]"
            _require(r, _REAL, _REAL, w)
            try:
                reals.append(StageRealization(
                    _matrix(r["A"], m, n, f"{w}.A"), _matrix(r["B"], m, n_prev, f"{w}.B"),
                    _vector(r["c"], n, f"{w}.c"), _vector(r["b"], m, f"{w}.b"), float(r["p"])))
            except (TypeError, ValueError) as exc:
                if isinstance(exc, ParseError):
                    raise
                raise ParseError(str(exc), field=w) from exc
        if not reals:
            raise ParseError("stage has no realizations", field=f"{where}.realizations")
        out.append(tuple(reals))
        n_prev = n
    return MslpInstance(tuple(out), name=data.get("name", ""))


def _vector(value, size, fld):
    arr = np.asarray(value, dtype=float)
    if arr.shape != (size,):
        raise ParseError(f"expected length {size}", field=fld)
    return arr


def _read_json(path):
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno) from exc


def load_instance(path):
    return instance_from_dict(_read_json(path))


def load_generator(path):
    """Generator settings stored with an instance file, or ``None``."""
    data = _read_json(path)
    return data.get("generator") if isinstance(data, dict) else None


def inventory_config_to_dict(config):
    """JSON-ready settings of an inventory config (cost vectors become lists)."""
    out = {"kind": "inventory", "T": config.T, "N": config.N, "x0": float(config.x0), "seed": config.seed}
    for name in ("a", "g", "h"):
        v = getattr(config, name)
        out[name] = None if v is None else np.asarray(v, dtype=float).tolist()
    if config.demand is not None:
        d = config.demand
        out["kind"] = "inventory-ar"
        out["demand"] = {"phi": d.phi, "mu": d.mu, "sigma2": d.sigma2, "D0": d.D0, "T": d.T}
    return out


def inventory_config_from_dict(data):
    if not isinstance(data, dict) or data.get("kind") not in ("inventory", "inventory-ar"):
        raise ParseError("not an inventory generator record", field="generator")
    try:
        demand = DemandProcessSpec(**data["demand"]) if data["kind"] == "inventory-ar" else None
        return InventoryConfig(T=int(data["T"]), N=int(data["N"]), a=data["a"], g=data["g"], h=data["h"],
                               x0=float(data["x0"]), demand=demand, seed=int(data["seed"]))
    except (KeyError, TypeError) as exc:
        raise ParseError(f"bad inventory generator record: {exc}", field="generator") from exc


def load_hydro_fixture():
    """Small four-reservoir hydro-thermal instance shipped with the package."""
    from importlib.resources import files
    return load_instance(files("mspduals") / "data" / "hydro_small.json")
