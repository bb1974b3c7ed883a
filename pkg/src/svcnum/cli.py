"""
Command line front end.

    svcnum run --scenario scenario1.json --algorithm simplified --out runs/s1
    svcnum validate --scenario scenario2.json
    svcnum oracle --grid-step 1

``run`` exits with 0 on convergence, 2 when the iteration cap is hit and 1
on load or solve errors. Set ``SVCNUM_LOG=debug`` (or ``info``) for logs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .topology import ScenarioError, is_feasible, link_flows, load_scenario
from .utility import check_concavity_conditions, numerical_concavity

log = logging.getLogger("svcnum")

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2


@dataclass
class RunManifest:
    """Everything needed to repeat a run."""

    scenario: str
    algorithm: str
    overrides: dict
    config: dict
    out_dir: str
    timestamp: str
    version: str = __version__
    notes: list = field(default_factory=list)


# ------------------------------------------------------------------ outputs

def write_trace(trace, path):
    """One CSV row per dual update."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(trace.header())
        for row in trace.rows():
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def solution_to_dict(sol, net, profiles) -> dict:
    """JSON-ready record of a :class:`~svcnum.scp_solver.Solution`.

    Floats go through ``repr`` precision, so reading back is exact. Prices
    are stored as logs as well, since they often underflow.
    """
    return {
        "algorithm": sol.algorithm,
        "converged": bool(sol.converged),
        "iterations": int(sol.iterations),
        "dual_updates": int(sol.dual_updates),
        "feasible": bool(sol.feasible),
        "session_ids": list(net.session_ids),
        "link_ids": list(net.link_ids),
        "rates_kbps": [float(v) for v in sol.x],
        "levels": [int(v) for v in sol.levels],
        "segments": [int(v) for v in sol.segments],
        "log_mu": [float(v) for v in sol.lam],
        "mu": [float(v) for v in np.exp(sol.lam)],
        "link_flows_kbps": [float(v) for v in link_flows(net, sol.x)],
        "log_objective": float(sol.objective),
        "raw_objective": float(sol.raw_objective),
        "kkt_residual": float(sol.kkt),
        "guards_hit": int(sol.guards_hit),
        "clamps": int(sol.clamps),
        "inner_failures": int(sol.inner_failures),
        "wall_time_s": float(sol.wall_time),
    }


def _json_float(v):
    # json has no infinities; keep them readable and reversible
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    if isinstance(v, list):
        return [_json_float(a) for a in v]
    if isinstance(v, dict):
        return {k: _json_float(a) for k, a in v.items()}
    return v


def _from_json_float(v):
    if isinstance(v, str) and v in ("inf", "-inf", "nan"):
        return float(v)
    if isinstance(v, list):
        return [_from_json_float(a) for a in v]
    if isinstance(v, dict):
        return {k: _from_json_float(a) for k, a in v.items()}
    return v


def write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(_json_float(obj), fh, indent=2)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return _from_json_float(json.load(fh))


def group_summary(sc, sol):
    """Rows ``(group, rate, reference, low, high, level, ref level, status)``.

    Sessions are grouped by the reference's ``group_by`` key and averaged.
    Without a reference every session is its own group.
    """
    ref = sc.reference or {}
    key = ref.get("group_by", "id")
    tol = float(ref.get("tolerance", 0.05))
    names = sc.network.session_ids if key == "id" else sc.sequence_names
    groups = {}
    for s, name in enumerate(names):
        groups.setdefault(name, []).append(s)
    rows = []
    for name, idx in groups.items():
        rate = float(np.mean(sol.x[idx]))
        levels = sorted({int(sol.levels[s]) for s in idx})
        r = ref.get("rates_kbps", {}).get(name)
        rl = ref.get("levels", {}).get(name)
        if r is None:
            rows.append((name, rate, None, None, None, levels, rl, "-"))
            continue
        lo, hi = r * (1 - tol), r * (1 + tol)
        ok = lo <= rate <= hi and (rl is None or levels == [rl])
        rows.append((name, rate, r, lo, hi, levels, rl, "within" if ok else "outside"))
    return rows


def format_summary(sc, sol) -> str:
    lines = [f"{'group':<12}{'rate':>10}{'ref':>8}{'band':>18}{'level':>8}{'ref lvl':>9}  status"]
    for name, rate, r, lo, hi, lv, rl, st in group_summary(sc, sol):
        band = f"[{lo:.0f}, {hi:.0f}]" if r is not None else "-"
        lvs = ",".join(str(v) for v in lv)
        lines.append(f"{name:<12}{rate:>10.2f}{(r if r is not None else '-'):>8}{band:>18}{lvs:>8}"
                     f"{(rl if rl is not None else '-'):>9}  {st}")
    flows = link_flows(sc.network, sol.x)
    util = ", ".join(f"{lid} {100 * f / c:.2f}%" for lid, f, c in zip(sc.network.link_ids, flows, sc.network.c))
    lines.append(f"utilisation: {util}")
    lines.append(f"log objective {sol.objective:.6f}  raw objective {sol.raw_objective:.6f}  "
                 f"KKT residual {sol.kkt:.3g}")
    lines.append(f"{sol.algorithm}: {'converged' if sol.converged else 'NOT converged'} after "
                 f"{sol.iterations} iterations ({sol.dual_updates} dual updates, {sol.wall_time:.2f} s)")
    if sc.reference is not None and sc.reference.get("gating") is False:
        lines.append("reference rates are informative only for this scenario")
    return "\n".join(lines)


# ------------------------------------------------------------------ commands

def cmd_run(args) -> int:
    try:
        sc = load_scenario(args.scenario)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    overrides = {k: getattr(args, k) for k in ("algorithm", "gamma", "th1", "th2", "max_outer",
                                                "max_inner", "exp_guard") if getattr(args, k) is not None}
    try:
        cfg = sc.config.replace(**overrides)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for note in sc.notes:
        log.info("%s: %s", sc.name, note)

    from .scp_solver import run
    stats = None
    try:
        if cfg.algorithm == "distributed":
            from .simnet import run_distributed, write_message_log
            sol, trace, stats = run_distributed(sc.network, sc.profiles, cfg, keep_log=args.message_log)
            if args.message_log:
                write_message_log(stats.log, out / "messages.csv")
        else:
            sol, trace = run(sc.network, sc.profiles, cfg)
    except (FloatingPointError, ValueError, RuntimeError) as exc:
        print(f"error: solve failed: {exc}", file=sys.stderr)
        return EXIT_ERROR

    write_trace(trace, out / "trace.csv")
    record = solution_to_dict(sol, sc.network, sc.profiles)
    record["scenario"] = sc.name
    if stats is not None:
        record["messages"] = {"count": stats.count, "rounds": stats.rounds, "per_link": stats.per_link}
    write_json(record, out / "solution.json")
    manifest = RunManifest(str(args.scenario), cfg.algorithm, overrides, cfg.to_dict(), str(out),
                           time.strftime("%Y-%m-%dT%H:%M:%S"), notes=list(sc.notes))
    write_json(manifest.__dict__, out / "manifest.json")

    from .plots import plot_duals, plot_rates
    plot_rates(out / "trace.csv", out / "rates.svg", f"{sc.name}: rates")
    plot_duals(out / "trace.csv", out / "duals.svg", f"{sc.name}: link prices")

    print(format_summary(sc, sol))
    print(f"outputs in {out}")
    return EXIT_OK if sol.converged else EXIT_NOT_CONVERGED


def cmd_validate(args) -> int:
    try:
        sc = load_scenario(args.scenario)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    failed = False
    for p in sc.profiles:
        rep = check_concavity_conditions(p)
        cert = numerical_concavity(p, n=2000)
        ok = rep.ok and cert.passed()
        failed |= not ok
        print(f"{p.session_id:<12}{rep}  grid check {'pass' if cert.passed() else 'FAIL'}")
    x0 = np.array([p.m for p in sc.profiles])
    feas = is_feasible(sc.network, sc.profiles, x0)
    print(f"initial point at minimum rates: {'feasible' if feas else 'INFEASIBLE'}")
    for note in sc.notes:
        print(f"note: {note}")
    return EXIT_ERROR if failed or not feas else EXIT_OK


def cmd_oracle(args) -> int:
    from .oracle import (GridSpec, grid_search_num, numeric_primal_oracle, random_primal_triples,
                         sample_majorant_gaps, small_instance)
    from .scp_solver import SolverConfig, kkt_residual, primal_from_log_price, run

    ok_all = True
    profiles = []
    for name in ("scenario1.json", "scenario2.json", "scenario3.json"):
        profiles += load_scenario(name).profiles
    t0 = time.perf_counter()
    worst = 0.0
    for p, lp, xr in random_primal_triples(profiles, n=args.samples):
        x = primal_from_log_price(p, lp, xr)[0]
        worst = max(worst, abs(x - numeric_primal_oracle(p, None, xr, log_mu=lp)))
    ok = worst <= 0.01
    ok_all &= ok
    print(f"{'PASS' if ok else 'FAIL'} primal agreement: max |closed form - scan| = {worst:.3g} Kbps "
          f"over {args.samples} triples ({time.perf_counter() - t0:.1f} s)")

    net, small = small_instance()
    gap, at_ref = sample_majorant_gaps(net, small, n=1000)
    ok = gap >= -1e-9 and at_ref <= 1e-9
    ok_all &= ok
    print(f"{'PASS' if ok else 'FAIL'} majorant: min gap {gap:.3g} Kbps, max gap at reference {at_ref:.3g}")

    x_g, v_g = grid_search_num(net, small, GridSpec(args.grid_step), "log-smoothed")
    sol, _ = run(net, small, SolverConfig(algorithm="simplified", th1=1e-6))
    kkt = kkt_residual(net, small, sol.x, log_mu=sol.lam)
    ok = sol.objective >= v_g - 0.01 * abs(v_g) or kkt <= 1e-4
    ok_all &= ok
    print(f"{'PASS' if ok else 'FAIL'} small instance: grid optimum {v_g:.6f} at "
          f"{np.array2string(x_g, precision=2)}, solver {sol.objective:.6f} at "
          f"{np.array2string(sol.x, precision=2)}, KKT {kkt:.3g} (grid step {args.grid_step} Kbps)")
    return EXIT_OK if ok_all else EXIT_ERROR


# ------------------------------------------------------------------ entry

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="svcnum", description="Quality-aware rate allocation for layered video.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="solve a scenario and write trace, solution and plots")
    p.add_argument("--scenario", required=True, help="scenario JSON path or bundled name")
    p.add_argument("--algorithm", choices=["two-tier", "simplified", "distributed"])
    p.add_argument("--gamma", type=float)
    p.add_argument("--th1", type=float)
    p.add_argument("--th2", type=float)
    p.add_argument("--max-outer", type=int)
    p.add_argument("--max-inner", type=int)
    p.add_argument("--exp-guard", type=float)
    p.add_argument("--out", default="svcnum-out")
    p.add_argument("--message-log", action="store_true", help="with --algorithm distributed, write messages.csv")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate", help="check utility conditions and the starting point")
    p.add_argument("--scenario", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("oracle", help="compare closed forms and solver against brute force")
    p.add_argument("--grid-step", type=float, default=0.05, help="grid step of the small-instance search, Kbps")
    p.add_argument("--samples", type=int, default=200)
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("SVCNUM_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
