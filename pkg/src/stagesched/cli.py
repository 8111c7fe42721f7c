"""Command-line entry point: ``stagesched {fit,ecdf,plan,baseline,run,fixture}``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import List, Optional, Tuple

from ._backend import BACKEND
from .baselines import max_heuristic, min_heuristic
from .catalog import Catalog, models_from_json
from .costmodel import CostTable, fit_coefficients, read_loading_csv, read_profile_csv
from .errors import ConfigError, InfeasibleError, InvalidStageError, PlanMismatchError
from .fixtures import FIXTURES, get_fixture
from .formats import build_workload, gpus_from_dict, lengths_from_dict, read_json, write_json
from .gantt import plan_svg, trace_svg
from .graph import AppGraph, requests_from_dict
from .planner import AppPlan, greedy_search
from .runtime import run_with_oracle
from .sampler import ecdfs_from_dict, ecdfs_to_dict, read_trace_csv
from .simulator import IterationTrace, SimContext

logger = logging.getLogger("stagesched")

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_MISMATCH = 0, 2, 3, 4
ITER_COLUMNS = ("node", "replica", "t_start", "kind", "B", "s", "S", "flops", "latency")


# ---------------------------------------------------------------------------
# loading inputs
# ---------------------------------------------------------------------------

def _load_inputs(args, known_path: Optional[str], seed: int) -> SimContext:
    models = models_from_json(read_json(args.models))
    topo, cfg, reserve = gpus_from_dict(read_json(args.gpus))
    catalog = Catalog(models, topo, reserve)
    try:
        table = CostTable.from_dict(read_json(args.cost_table))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"{args.cost_table}: malformed cost table ({e})") from None
    table.check_coverage(catalog)
    graph = AppGraph.from_dict(read_json(args.app))
    requests = requests_from_dict(read_json(args.requests))
    known = lengths_from_dict(read_json(known_path)) if known_path else None
    ecdfs = ecdfs_from_dict(read_json(args.ecdf)) if args.ecdf else {}
    workload = build_workload(catalog, graph, requests, ecdfs, seed, known)
    return SimContext(catalog, table, cfg, workload)


def _plan(ctx: SimContext, algo: str, allow_preemption: bool) -> AppPlan:
    if algo == "greedy":
        return greedy_search(ctx, allow_preemption)
    if algo == "min":
        return min_heuristic(ctx, allow_preemption)
    if algo == "max":
        return max_heuristic(ctx)
    raise ConfigError(f"unknown algorithm {algo!r}")


def _workload_summary(ctx: SimContext) -> dict:
    w = ctx.workload
    return {n: {"model_id": ctx.graph.model_of[n], "requests": int(w.nodes[n].n),
                "output_tokens": int(w.nodes[n].out_len.sum())} for n in ctx.graph.node_ids}


def _write_iterations(path: Path, items: List[Tuple[str, IterationTrace]]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(ITER_COLUMNS)
        for node, tr in items:
            for k, row in enumerate(tr.rows()):
                wr.writerow((node, int(tr.replica[k])) + tuple(row))


def _print_plan(plan: AppPlan, ctx: SimContext, out=sys.stdout) -> None:
    print(f"algorithm: {plan.algorithm}  preemption: {'on' if plan.allow_preemption else 'off'}  "
          f"backend: {BACKEND}", file=out)
    print(f"planning time: {plan.planning_seconds:.3f} s  candidate evaluations: {plan.candidate_evaluations}",
          file=out)
    print("workloads:", file=out)
    for n, info in _workload_summary(ctx).items():
        print(f"  {n:<16} {info['model_id']:<18} requests={info['requests']:<6} "
              f"output_tokens={info['output_tokens']}", file=out)
    print(f"{'stage':>5} {'start':>10} {'duration':>10} {'gpus':>4}  entries", file=out)
    for k, s in enumerate(plan.stages):
        ents = ", ".join(f"{n}{p}" for n, p in s.entries)
        print(f"{k:>5} {s.start:>10.3f} {s.planned_duration:>10.3f} {s.gpus_used:>4}  {ents}", file=out)
    print(f"planned total: {plan.total_latency:.3f} s", file=out)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_fit(args) -> int:
    table = fit_coefficients(read_profile_csv(args.profile), args.trim)
    if args.loading:
        read_loading_csv(args.loading, table)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "cost_table.json", table.to_dict())
    n = sum(len(pc.entries) for phases in table.coefficients.values() for pc in phases.values())
    print(f"fitted {n} coefficient buckets for {len(table.coefficients)} (model, tp) pairs -> "
          f"{out / 'cost_table.json'}")
    return EXIT_OK


def cmd_ecdf(args) -> int:
    ecdfs = read_trace_csv(args.trace)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "ecdf.json", ecdfs_to_dict(ecdfs))
    for mid, e in sorted(ecdfs.items()):
        print(f"{mid}: {e.n} samples")
    return EXIT_OK


def cmd_plan(args) -> int:
    ctx = _load_inputs(args, args.known_lengths, args.seed)
    plan = _plan(ctx, args.algo, not args.no_preemption)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    extra = {"num_gpus": ctx.catalog.topo.num_gpus, "seed": args.seed,
             "known_lengths": bool(args.known_lengths), "workloads": _workload_summary(ctx)}
    write_json(out / "plan.json", plan.to_dict(extra=extra))
    (out / "plan_gantt.svg").write_text(plan_svg(plan, ctx.catalog.topo.num_gpus))
    if args.trace_iterations:
        _write_iterations(out / "plan_iterations.csv",
                          [(n, seg.traces[n]) for seg in plan.segments for n, _ in seg.entries])
    _print_plan(plan, ctx)
    return EXIT_OK


def cmd_run(args) -> int:
    if args.plan:
        plan = AppPlan.from_dict(read_json(args.plan))
        if args.algo and args.algo != plan.algorithm:
            logger.info("replaying %s plan from %s", plan.algorithm, args.plan)
    else:
        plan_ctx = _load_inputs(args, args.known_lengths, args.seed)
        plan = _plan(plan_ctx, args.algo or "greedy", not args.no_preemption)
    oracle_seed = args.seed if args.oracle_seed is None else args.oracle_seed
    oracle_known = args.oracle_lengths or (args.known_lengths if args.oracle_seed is None else None)
    ctx = _load_inputs(args, oracle_known, oracle_seed)
    trace = run_with_oracle(plan, ctx)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    d = trace.to_dict()
    planned = plan.total_latency
    err = abs(planned - trace.total_time) / trace.total_time if trace.total_time > 0 else 0.0
    d.update({"planned_total": planned, "error_ratio": err, "algorithm": plan.algorithm})
    write_json(out / "trace.json", d)
    (out / "gantt.svg").write_text(trace_svg(trace, f"{plan.algorithm}: {trace.total_time:.2f} s"))
    if args.trace_iterations:
        _write_iterations(out / "iterations.csv", trace.iterations)
    idle = d["idle"]["total"]
    print(f"planned total: {planned:.3f} s")
    print(f"actual total:  {trace.total_time:.3f} s")
    print(f"error ratio:   {err:.4f}")
    print(f"GPU idle time: {idle:.3f} GPU-s  fallback: {'yes' if trace.fallback_used else 'no'}")
    return EXIT_OK


def cmd_fixture(args) -> int:
    fx = get_fixture(args.name)
    paths = fx.write(args.out_dir, args.seed)
    for k, p in paths.items():
        print(f"{k}: {p}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_inputs(p: argparse.ArgumentParser) -> None:
    p.add_argument("--models", required=True, help="models.json")
    p.add_argument("--gpus", required=True, help="gpus.json (topology and engine settings)")
    p.add_argument("--cost-table", required=True, help="cost_table.json from 'fit'")
    p.add_argument("--ecdf", help="ecdf.json with output-length distributions")
    p.add_argument("--app", required=True, help="app.json (computation graph)")
    p.add_argument("--requests", required=True, help="requests.json")
    p.add_argument("--seed", type=int, default=0, help="output-length sampling seed")
    p.add_argument("--no-preemption", action="store_true", help="keep a started model's plan until it finishes")
    p.add_argument("--known-lengths", help="lengths.json with true output lengths instead of sampling")
    p.add_argument("--out-dir", default=".", help="directory for output files")
    p.add_argument("--trace-iterations", action="store_true", help="also write per-iteration CSV")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stagesched", description=__doc__)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit cost coefficients from a profile CSV")
    p.add_argument("profile", help="CSV with model_id,tp,phase,B,x,latency_s")
    p.add_argument("--loading", help="CSV with model_id,dp,tp,seconds")
    p.add_argument("--trim", type=float, default=0.0, help="fraction of outliers to drop per bucket")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("ecdf", help="build output-length eCDFs from a trace CSV")
    p.add_argument("trace", help="CSV with model_id,output_len")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_ecdf)

    p = sub.add_parser("plan", help="build a stage plan")
    _add_inputs(p)
    p.add_argument("--algo", choices=("greedy", "max", "min"), default="greedy")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("baseline", help="build a plan with a comparison heuristic")
    _add_inputs(p)
    p.add_argument("--algo", choices=("max", "min"), required=True)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("run", help="replay a plan against ground-truth output lengths")
    _add_inputs(p)
    p.add_argument("--algo", choices=("greedy", "max", "min"), default=None)
    p.add_argument("--plan", help="plan.json to replay (default: plan now)")
    p.add_argument("--oracle-lengths", help="lengths.json with the true output lengths")
    p.add_argument("--oracle-seed", type=int, default=None, help="sample true lengths with this seed")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("fixture", help="write a built-in example application")
    p.add_argument("name", choices=sorted(FIXTURES))
    p.add_argument("--out-dir", default=".")
    p.add_argument("--seed", type=int, default=None, help="also write sampled lengths.json")
    p.set_defaults(func=cmd_fixture)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (PlanMismatchError, InvalidStageError) as e:
        print(f"error: plan does not match the application: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except InfeasibleError as e:
        print(f"error: infeasible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ConfigError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
