"""Command-line front end.

Every subcommand reads an instance file (``gen-inventory`` writes one),
writes CSV/JSON artifacts plus ``<command>.manifest.json`` echoing the
resolved configuration into ``--out``, and exits with 0 on success, 2 on a
usage error and 3 when a solver fails. Outputs are deterministic for a fixed
seed. Inputs are validated before anything is written.
"""
import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, asdict

import numpy as np

from . import dual as dual_mod
from .instances import (DemandProcessSpec, InventoryConfig, ParseError, InvalidCosts, InvalidProcess,
                        inventory_config_from_dict, inventory_config_to_dict, load_generator, load_instance,
                        make_inventory_instance, save_instance)
from .lp import NumericalFailure
from .model import (DualBox, InfeasibleInstance, NoLowerBound, NotStrictlyFeasible, TreeTooLarge, dual_boxes,
                    solve_deterministic_equivalent, validate_instance)

log = logging.getLogger("mspduals")

EXIT_OK, EXIT_USAGE, EXIT_SOLVER = 0, 2, 3
THREADS_ENV = "MSPDUALS_THREADS"

SOLVER_ERRORS = (NumericalFailure, InfeasibleInstance, NoLowerBound, NotStrictlyFeasible, TreeTooLarge,
                 dual_mod.RootInfeasible, dual_mod.DualSolveError, RuntimeError)


class UsageError(Exception):
    pass


class IoError(OSError):
    pass


@dataclass
class RunConfig:
    """Resolved settings of one run; written verbatim to the manifest."""

    command: str
    instance: str = None
    seed: int = None
    options: dict = field(default_factory=dict)
    out: str = "."
    threads: int = 1
    # the command line as given; replaying it reproduces the run
    argv: list = field(default_factory=list)

    def manifest(self):
        from importlib.metadata import version, PackageNotFoundError
        try:
            v = version("mspduals")
        except PackageNotFoundError:
            v = "unknown"
        return {"package": "mspduals", "version": v, **asdict(self)}


def emit_trace_csv(trace, path):
    """Write a primal or dual bound trace as CSV (LF line endings, ``repr`` floats)."""
    try:
        trace.to_csv(path)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _write_json(path, obj):
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(obj, fh, indent=1, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _threads():
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    # all solves run in this process; the cap cannot be exceeded
    return n


def _load(path):
    if not os.path.isfile(path):
        raise UsageError(f"instance file not found: {path}")
    try:
        inst = load_instance(path)
    except ParseError as exc:
        where = f" (field {exc.field})" if exc.field else f" (line {exc.line})" if exc.line else ""
        raise UsageError(f"cannot parse {path}{where}: {exc}") from exc
    bad = validate_instance(inst)
    if bad:
        raise UsageError(f"invalid instance {path}: " + "; ".join(v.message for v in bad[:5]))
    return inst


def _out_dir(path):
    if os.path.exists(path) and not os.path.isdir(path):
        raise UsageError(f"--out {path} exists and is not a directory")
    return path


def _boxes(arg, instance):
    if arg in (None, "computed"):
        return None
    if not os.path.isfile(arg):
        raise UsageError(f"box file not found: {arg}")
    try:
        with open(arg, encoding="utf-8") as fh:
            box = DualBox.from_dict(json.load(fh))
    except (ValueError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read box file {arg}: {exc}") from exc
    if box.T != instance.T or any(box.lower[t].shape != (instance.m(t),) for t in range(instance.T)):
        raise UsageError("box file does not match the instance dimensions")
    return box


def _ready(cfg):
    """Create the output directory; called only once the inputs are validated."""
    try:
        os.makedirs(cfg.out, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {cfg.out}: {exc}") from exc


def _positive(name, value):
    if value is not None and value <= 0:
        raise UsageError(f"{name} must be positive")


# ------------------------------------------------------------- subcommands


def cmd_gen_inventory(args, cfg):
    ar = args.phi is not None or args.mu is not None
    if ar and (args.phi is None or args.mu is None):
        raise UsageError("--phi and --mu go together")
    if args.T < 1 or args.N < 1:
        raise UsageError("--T and --N must be at least 1")
    try:
        demand = DemandProcessSpec(args.phi, args.mu, args.sigma2, args.D0, args.T) if ar else None
        config = InventoryConfig(T=args.T, N=args.N, x0=args.x0, demand=demand, seed=args.seed)
        inst = make_inventory_instance(config)
    except (InvalidCosts, InvalidProcess) as exc:
        raise UsageError(str(exc)) from exc
    out_dir = os.path.dirname(os.path.abspath(args.output))
    if not os.path.isdir(out_dir):
        raise UsageError(f"directory does not exist: {out_dir}")
    cfg.options = inventory_config_to_dict(config)
    save_instance(inst, args.output, generator=cfg.options)
    cfg.out = out_dir
    return {"instance": args.output}


def cmd_det_equiv(args, cfg):
    inst = _load(args.instance)
    cfg.options = {"node_cap": args.node_cap}
    value, sol, idx = solve_deterministic_equivalent(inst, node_cap=args.node_cap)
    print(repr(float(value)))
    first = sol.primal[idx.cols(0)]
    return {"value": float(value), "first_stage": first.tolist(), "nodes": len(idx)}


def cmd_solve_primal(args, cfg):
    from .primal import PrimalConfig, run_primal_sddp
    inst = _load(args.instance)
    if args.ub_mode not in ("statistical", "exact"):
        raise UsageError("--ub-mode is statistical or exact")
    _positive("--iters", args.iters)
    pc = PrimalConfig(max_iters=args.iters, gap_tol=args.gap, seed=args.seed, forward_paths=args.forward_paths,
                      ub_mode=args.ub_mode, confidence=args.confidence)
    cfg.options = asdict(pc)
    _ready(cfg)
    res = run_primal_sddp(inst, pc)
    emit_trace_csv(res.trace, os.path.join(cfg.out, "primal_trace.csv"))
    print(f"lb {res.lower_bound!r} ub {res.upper_bound!r} iterations {res.iterations}")
    return {"lower_bound": res.lower_bound, "upper_bound": res.upper_bound, "gap": res.gap,
            "converged": res.converged, "iterations": res.iterations,
            "first_stage": np.asarray(res.first_stage).tolist()}


def _run_dual(args, cfg, penalized):
    inst = _load(args.instance)
    box = _boxes(args.boxes, inst)
    _positive("--iters", args.iters)
    if penalized:
        try:
            schedule = dual_mod.PenaltySchedule(args.gamma0, args.alpha, args.cap)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    else:
        schedule = None
    dc = dual_mod.DualConfig(max_iters=args.iters, seed=args.seed, lower_bound=args.lower_bound,
                             gap_tol=args.gap, cut_method=args.cut_method)
    cfg.options = {**asdict(dc), "boxes": args.boxes or "computed",
                   "schedule": asdict(schedule) if schedule else None,
                   "variant": getattr(args, "variant", "standard")}
    box = box if box is not None else dual_boxes(inst)
    try:
        if penalized and args.variant == "all-random":
            model = dual_mod.AllRandomDualModel(inst, box)
        else:
            model = dual_mod.DualModel(inst, box)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    _ready(cfg)
    _write_json(os.path.join(cfg.out, "boxes.json"), box.to_dict())
    res = dual_mod.run_dual_sddp(model, schedule, dc)
    emit_trace_csv(res.trace, os.path.join(cfg.out, "dual_trace.csv"))
    if not penalized:
        dual_mod.write_feasibility_cuts(res.feasibility_cuts, os.path.join(cfg.out, "feasibility_cuts.jsonl"))
    print(f"ub_dual {res.upper_bound!r} iterations {res.iterations}")
    return {"upper_bound": res.upper_bound, "iterations": res.iterations,
            "feasibility_cuts": len(res.feasibility_cuts), "first_stage_pi": np.asarray(res.first_stage).tolist()}


def cmd_solve_dual_pen(args, cfg):
    return _run_dual(args, cfg, True)


def cmd_solve_dual_feas(args, cfg):
    return _run_dual(args, cfg, False)


def cmd_oracle(args, cfg):
    from .oracle import check_scalar_instance, solve_dual_dp
    inst = _load(args.instance)
    box = _boxes(args.boxes, inst)
    if args.nodes < 2:
        raise UsageError("--nodes must be at least 2")
    gammas = args.gamma or [None]
    for g in gammas:
        _positive("--gamma", g)
    cfg.options = {"nodes": args.nodes, "gamma": gammas, "boxes": args.boxes or "computed"}
    box = box if box is not None else dual_boxes(inst)
    try:
        check_scalar_instance(inst)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    summary = {}
    _ready(cfg)
    for g in gammas:
        res = solve_dual_dp(inst, args.nodes, gamma=g, boxes=box)
        tag = "exact" if g is None else f"gamma{g:g}"
        for fn in res.functions:
            fn.to_csv(os.path.join(cfg.out, f"oracle_{tag}_stage{fn.stage}.csv"))
        summary[tag] = {"first_stage_value": res.first_stage_value, "first_stage_pi": res.first_stage_pi}
        print(f"{tag} {res.first_stage_value!r}")
    return summary


def cmd_sensitivity(args, cfg):
    from .sensitivity import inventory_sensitivity
    _load(args.instance)
    gen = load_generator(args.instance)
    try:
        config = inventory_config_from_dict(gen) if gen else None
    except ParseError as exc:
        raise UsageError(str(exc)) from exc
    if config is None or config.demand is None:
        raise UsageError("sensitivity needs an instance written by gen-inventory with --phi and --mu")
    _positive("--sims", args.sims)
    _positive("--delta", args.delta)
    params = ("phi", "mu") if args.param == "both" else (args.param,)
    deltas = {p: args.delta for p in params} if args.delta else None
    cfg.options = {"param": list(params), "sims": args.sims, "primal_iters": args.primal_iters,
                   "sim_seed": args.sim_seed, "delta": args.delta}
    _ready(cfg)
    report = inventory_sensitivity(config, params, n_sims=args.sims, primal_iters=args.primal_iters,
                                   seed=args.seed, sim_seed=args.sim_seed, deltas=deltas)
    path = os.path.join(cfg.out, "sensitivity.csv")
    try:
        report.to_csv(path)
    except OSError as exc:
        raise IoError(str(exc)) from exc
    for r in report.rows:
        print(f"{r.param} fd {r.fd!r} estimate {r.estimate.value!r} gap% {r.gap_percent:.4f}")
    return {r.param: {"fd": r.fd, "estimate": r.estimate.value, "stderr": r.estimate.stderr,
                      "delta": r.delta} for r in report.rows}


COMMANDS = {
    "gen-inventory": cmd_gen_inventory,
    "det-equiv": cmd_det_equiv,
    "solve-primal": cmd_solve_primal,
    "solve-dual-pen": cmd_solve_dual_pen,
    "solve-dual-feas": cmd_solve_dual_feas,
    "oracle": cmd_oracle,
    "sensitivity": cmd_sensitivity,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="mspduals", description="Primal and dual SDDP for multistage stochastic LPs.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_instance(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("instance", help="instance JSON file")
        s.add_argument("--out", default=".", help="output directory (created if missing)")
        s.add_argument("--seed", type=int, default=0)
        return s

    g = sub.add_parser("gen-inventory", help="write an inventory instance")
    g.add_argument("--T", type=int, required=True)
    g.add_argument("--N", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--x0", type=float, default=10.0)
    g.add_argument("--phi", type=float, help="autoregressive demand coefficient")
    g.add_argument("--mu", type=float, help="autoregressive demand intercept")
    g.add_argument("--sigma2", type=float, default=0.25, help="noise variance")
    g.add_argument("--D0", type=float, default=10.0, help="initial demand")
    g.add_argument("-o", "--output", required=True, help="instance file to write")

    s = with_instance("det-equiv", "solve the deterministic equivalent")
    s.add_argument("--node-cap", type=int, default=10**6)

    s = with_instance("solve-primal", "primal SDDP")
    s.add_argument("--iters", type=int, default=500)
    s.add_argument("--gap", type=float, default=1e-2)
    s.add_argument("--ub-mode", default="statistical")
    s.add_argument("--forward-paths", type=int, default=1)
    s.add_argument("--confidence", type=float, default=0.975)

    for name, pen in (("solve-dual-pen", True), ("solve-dual-feas", False)):
        s = with_instance(name, "dual SDDP with " + ("penalties" if pen else "feasibility cuts"))
        s.add_argument("--iters", type=int, default=200)
        s.add_argument("--boxes", help="'computed' (default) or a JSON box file")
        s.add_argument("--lower-bound", type=float, help="stop once the relative gap to this bound is below --gap")
        s.add_argument("--gap", type=float, default=0.0)
        s.add_argument("--cut-method", choices=("duals", "explicit"), default="duals")
        if pen:
            s.add_argument("--gamma0", type=float, default=1e3)
            s.add_argument("--alpha", type=float, default=1.0)
            s.add_argument("--cap", type=float, default=dual_mod.DEFAULT_CAP)
            s.add_argument("--variant", choices=("standard", "all-random"), default="standard")

    s = with_instance("oracle", "grid dynamic programming on the dual recursion")
    s.add_argument("--nodes", type=int, default=401)
    s.add_argument("--gamma", type=float, action="append", help="penalty (repeatable); omit for the exact recursion")
    s.add_argument("--boxes")

    s = with_instance("sensitivity", "derivatives in the demand parameters")
    s.add_argument("--param", choices=("phi", "mu", "both"), default="both")
    s.add_argument("--sims", type=int, default=10_000)
    s.add_argument("--primal-iters", type=int, default=100)
    s.add_argument("--sim-seed", type=int, default=5)
    s.add_argument("--delta", type=float, help="finite-difference step (default 1e-4 |u|)")
    return p


def run_command(argv):
    """Run one command; returns the exit code."""
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr, format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
        cfg = RunConfig(args.command, getattr(args, "instance", None), args.seed, threads=_threads(),
                        argv=list(argv))
        if hasattr(args, "out"):
            cfg.out = _out_dir(args.out)
        result = COMMANDS[args.command](args, cfg)
        _ready(cfg)
        _write_json(os.path.join(cfg.out, f"{args.command}.manifest.json"), {**cfg.manifest(), "result": result})
        return EXIT_OK
    except UsageError as exc:
        print(f"mspduals: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IoError as exc:
        print(f"mspduals: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except SOLVER_ERRORS as exc:
        print(f"mspduals: solver error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER


def main(argv=None):
    sys.exit(run_command(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
