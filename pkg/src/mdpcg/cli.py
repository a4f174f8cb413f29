"""Command-line entry point: ``mdpcg {solve,toll,report}``.

Exit codes: 0 success, 2 bad config or input, 3 solver capability error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import CapabilityError, DimensionError, InfeasibleError, ValidationError
from .game import StopRule, eval_costs, solve_equilibrium_fw
from .io import read_jsonl, write_csv, write_json
from .scenario import build_instance, load_config, zone_loads
from .tolling import (EpsSchedule, TollConfig, convergence_report, dual_value_and_gradient,
                      synthesize_tolls)

log = logging.getLogger("mdpcg")

EXIT_INPUT = 2
EXIT_CAPABILITY = 3
DEFAULT_EPS = 1e-6


class InputError(Exception):
    pass


def workers() -> int:
    try:
        return max(1, int(os.environ.get("MDPCG_THREADS", "1")))
    except ValueError:
        raise InputError("MDPCG_THREADS must be an integer") from None


def _settings(args, cfg: dict) -> dict:
    solver = dict(cfg.get("solver", {}))
    toll = dict(cfg.get("toll", {}))
    eps = args.eps_target if args.eps_target is not None else solver.get("eps_target", DEFAULT_EPS)
    out = {"eps_target": float(eps),
           "max_iters": int(solver.get("max_iters", 100_000)),
           "step_rule": solver.get("step_rule", "pairwise"),
           "seed": args.seed if args.seed is not None else int(cfg.get("seed", 0))}
    if getattr(args, "iters", None) is not None:
        toll["iters"] = args.iters
    if getattr(args, "gamma", None) is not None:
        toll["gamma"] = args.gamma
    if getattr(args, "eps_schedule", None) is not None:
        toll["eps_schedule"] = args.eps_schedule
    out["iters"] = int(toll.get("iters", 500))
    out["gamma"] = None if toll.get("gamma") is None else float(toll["gamma"])
    out["schedule"] = EpsSchedule.parse(toll.get("eps_schedule", f"const:{out['eps_target']!r}"))
    out["polish"] = bool(toll.get("polish", False))
    if out["iters"] < 1 or out["max_iters"] < 1:
        raise InputError("iteration counts must be positive")
    if out["gamma"] is not None and out["gamma"] <= 0:
        raise InputError("gamma must be positive")
    if out["eps_target"] < 0:
        raise InputError("eps-target must be nonnegative")
    return out


def _load(args):
    if args.config is None:
        raise InputError("--config is required")
    cfg = load_config(args.config)
    opts = _settings(args, cfg)
    inst = build_instance(cfg, opts["seed"])
    return cfg, opts, inst


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _clean_config(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if not k.startswith("_")}


def cmd_solve(args) -> int:
    cfg, opts, inst = _load(args)
    out = _outdir(args)
    res = solve_equilibrium_fw(inst.model, inst.kernel, inst.initial,
                               StopRule(opts["max_iters"], opts["eps_target"]),
                               step_rule=opts["step_rule"])
    doc = res.to_json()
    doc.update(eps_target=opts["eps_target"], seed=opts["seed"], mass=inst.mass,
               config=_clean_config(cfg))
    write_json(out / "equilibrium.json", doc)
    write_csv(out / "gaps.csv", ["iteration", "gap"], enumerate(res.gap_history))
    loads = zone_loads(res.y)
    write_csv(out / "zone_loads.csv", ["t", "s", "load"],
              ((t, s, loads[t, s]) for t in range(loads.shape[0]) for s in range(loads.shape[1])))
    print(f"solved: {res.iterations} iterations, certified gap {res.epsilon:.3e}"
          f"{'' if res.converged else ' (max_iters reached)'}")
    return 0


def _avg_cost(model, y) -> float:
    return float(np.sum(y * eval_costs(model, y))) / float(np.sum(y[0]))


def cmd_toll(args) -> int:
    cfg, opts, inst = _load(args)
    if inst.constraints is None:
        raise InputError("toll needs a constraint set; add 'capacity' to the config")
    out = _outdir(args)
    model, cons, P, p = inst.model, inst.constraints, inst.kernel, inst.initial
    sched = opts["schedule"]
    tc = TollConfig(iters=opts["iters"], gamma=opts["gamma"], eps=sched,
                    step_rule=opts["step_rule"], max_inner_iters=opts["max_iters"],
                    polish=opts["polish"])
    # Same code path as the k = 0 response at tau = 0, so an untouched toll
    # normalises to exactly 1.
    base = dual_value_and_gradient(model, cons, P, p, np.zeros(cons.C), sched(0),
                                   step_rule=opts["step_rule"], max_iters=opts["max_iters"],
                                   polish=opts["polish"])
    baseline = _avg_cost(model, base.y)
    traj = synthesize_tolls(model, cons, P, p, tc)
    traj.write_jsonl(out / "trajectory.jsonl", cons, model)
    cons.save(out / "constraints.txt")
    oracle = dual = None
    if args.oracle:
        from .oracle import DualOracle, solve_constrained_potential
        oracle = solve_constrained_potential(model, cons, P, p)
        dual = DualOracle(model, cons, P, p)
        write_json(out / "oracle.json", {"y": oracle.y.ravel().tolist(),
                                         "tau": oracle.tau.tolist(), "F": oracle.F,
                                         "d": oracle.d, "kkt_residual": oracle.kkt_residual})
    convergence_report(traj, cons, oracle, dual, workers()).to_csv(out / "convergence.csv")
    write_json(out / "run.json", {
        "seed": opts["seed"], "iters": opts["iters"], "gamma": traj.gamma,
        "alpha": traj.alpha, "norm_A": traj.norm_A, "eps_schedule": str(sched),
        "eps_target": opts["eps_target"], "polish": opts["polish"], "mass": inst.mass,
        "capacity": inst.meta.get("capacity"), "baseline_avg_cost": baseline,
        "baseline_violation": float(cons.violation(base.y).sum()),
        "oracle": bool(args.oracle), "config": _clean_config(cfg)})
    last = traj.avg_y()[-1]
    print(f"tolled: K={traj.K}, gamma={traj.gamma:.4g}, final average violation "
          f"{cons.violation(last).sum():.4g} (untolled {cons.violation(base.y).sum():.4g})")
    return 0


def _report_run(run: Path, out: Path) -> dict:
    try:
        meta = json.loads((run / "run.json").read_text())
        recs = read_jsonl(run / "trajectory.jsonl")
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"{run}: missing or unreadable run artifacts ({exc})") from None
    if not recs:
        raise InputError(f"{run}: empty trajectory")
    base = meta["baseline_avg_cost"]
    write_csv(out / "toll_vs_k.csv", ["k", "total_toll", "avg_total_toll", "tau_norm"],
              ((r["k"], sum(r["tau_next"]), sum(r["avg_tau"]), np.linalg.norm(r["tau_next"]))
               for r in recs))
    write_csv(out / "violation_vs_k.csv",
              ["k", "violation", "total_violation", "avg_violation", "avg_total_violation"],
              ((r["k"], r["violation"], r["total_violation"], r["avg_violation"],
                r["avg_total_violation"]) for r in recs))
    write_csv(out / "avg_cost_vs_k.csv",
              ["k", "avg_cost", "normalized", "avg_cost_ybar", "normalized_ybar"],
              ((r["k"], r["avg_cost"], r["avg_cost"] / base, r["avg_cost_ybar"],
                r["avg_cost_ybar"] / base) for r in recs))
    last = recs[-1]
    return {"run": run.name, "eps_schedule": meta["eps_schedule"], "seed": meta["seed"],
            "K": len(recs), "final_avg_violation": last["avg_total_violation"],
            "final_avg_toll": sum(last["avg_tau"]),
            "final_normalized_cost": last["avg_cost"] / base,
            "final_normalized_cost_ybar": last["avg_cost_ybar"] / base,
            "baseline_violation": meta.get("baseline_violation", float("nan"))}


def cmd_report(args) -> int:
    runs = [Path(r) for r in args.runs]
    for r in runs:
        if not r.is_dir():
            raise InputError(f"run directory {r} does not exist")
    if len(runs) == 1:
        out = Path(args.out) if args.out else runs[0]
        out.mkdir(parents=True, exist_ok=True)
        _report_run(runs[0], out)
        return 0
    out = Path(args.out) if args.out else Path("report")
    rows = []
    for r in runs:
        sub = out / r.name
        sub.mkdir(parents=True, exist_ok=True)
        rows.append(_report_run(r, sub))
    names = list(rows[0])
    write_csv(out / "eps_sweep.csv", names, ([row[n] for n in names] for row in rows))
    return 0


def cmd_oracle(args) -> int:
    from .oracle import solve_constrained_potential
    _, _, inst = _load(args)
    if inst.constraints is None:
        raise InputError("oracle needs a constraint set")
    sol = solve_constrained_potential(inst.model, inst.constraints, inst.kernel, inst.initial)
    write_json(_outdir(args) / "oracle.json",
               {"y": sol.y.ravel().tolist(), "tau": sol.tau.tolist(), "F": sol.F,
                "d": sol.d, "kkt_residual": sol.kkt_residual})
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mdpcg", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", metavar="{solve,toll,report}", required=True)

    def common(p):
        p.add_argument("--config", metavar="PATH")
        p.add_argument("--out", metavar="DIR", default=".")
        p.add_argument("--seed", type=int, metavar="N")
        p.add_argument("--eps-target", type=float, metavar="F")

    p = sub.add_parser("solve", help="untolled equilibrium of a scenario")
    common(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("toll", help="iterative toll synthesis")
    common(p)
    p.add_argument("--gamma", type=float, metavar="F")
    p.add_argument("--iters", type=int, metavar="N")
    p.add_argument("--eps-schedule", metavar="SPEC",
                   help="const:F | harmonic:F | geom:F,R")
    p.add_argument("--oracle", action="store_true",
                   help="add bound columns from the dense reference solver")
    p.set_defaults(func=cmd_toll)

    p = sub.add_parser("report", help="plot-ready CSVs from toll runs")
    p.add_argument("runs", nargs="+", metavar="RUN_DIR")
    p.add_argument("--out", metavar="DIR")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("oracle")
    common(p)
    p.set_defaults(func=cmd_oracle)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, ValidationError, DimensionError, KeyError, TypeError) as exc:
        print(f"mdpcg: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (CapabilityError, InfeasibleError) as exc:
        print(f"mdpcg: capability error: {exc}", file=sys.stderr)
        return EXIT_CAPABILITY


if __name__ == "__main__":
    sys.exit(main())
