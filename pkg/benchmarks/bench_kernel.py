"""Compare the compiled simulation kernel with the pure-Python fallback.

    python3 benchmarks/bench_kernel.py [--requests 2000] [--repeat 3]
"""
from __future__ import annotations

import argparse
import random
import time

from stagesched import _backend
from stagesched.baselines import min_heuristic
from stagesched.catalog import ExecutionPlan, ModelSpec
from stagesched.costmodel import CostTable, PhaseCoefficients
from stagesched.fixtures import get_fixture
from stagesched.planner import greedy_search
from stagesched.simulator import EngineConfig, SimRequest, simulate_model


def _workload(n, seed):
    rng = random.Random(seed)
    model = ModelSpec("bench", 32, 4096, 12.0 * 4096 * 4096, 4096, 13 << 30, 4 * 4096, (1,))
    reqs = []
    for i in range(n):
        inp = rng.randint(16, 1024)
        reqs.append(SimRequest(f"r{i}", inp, rng.randint(1, 1024), ready_time=rng.uniform(0, 30)))
    table = CostTable()
    table.set_phase("bench", 1, PhaseCoefficients("comp", {1: (1e-14, 0.01), 256: (1e-14, 0.03)}))
    table.set_phase("bench", 1, PhaseCoefficients("prep", {1: (1e-6, 0.001)}))
    table.set_phase("bench", 1, PhaseCoefficients("samp", {1: (0.0, 0.0005)}))
    return model, reqs, table


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--requests", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    backends = ["python"] + (["compiled"] if _backend._compiled is not None else [])
    model, reqs, table = _workload(args.requests, args.seed)
    cfg = EngineConfig(256)
    rows = []
    for dp in (1, 4):
        res = {}
        for b in backends:
            dt, r = _best(lambda: simulate_model(model, ExecutionPlan(dp, 1), reqs, table, cfg,
                                                 kv_capacity=200_000, backend=b), args.repeat)
            res[b] = (dt, r)
        n_iter = len(res["python"][1].iteration_trace.B)
        rows.append((f"simulate {args.requests} requests, dp={dp} ({n_iter} iterations)", res))
    for name, algo in (("chain_summary", greedy_search), ("ensembling", min_heuristic)):
        fx = get_fixture(name)
        res = {b: _best(lambda: algo(fx.context(backend=b)), 1) for b in backends}
        rows.append((f"{algo.__name__} on {name}", res))

    print(f"{'case':<58} {'python s':>10} {'compiled s':>11} {'speedup':>8}  same")
    for name, res in rows:
        py = res["python"][0]
        if "compiled" in res:
            cp = res["compiled"][0]
            a, b = res["python"][1], res["compiled"][1]
            same = (a.total_time == b.total_time) if hasattr(a, "total_time") else (a.total_latency == b.total_latency)
            print(f"{name:<58} {py:>10.3f} {cp:>11.3f} {py / cp:>7.1f}x  {same}")
        else:
            print(f"{name:<58} {py:>10.3f} {'n/a':>11}")


if __name__ == "__main__":
    main()
