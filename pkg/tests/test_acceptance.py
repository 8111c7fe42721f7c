"""Acceptance suite: one test per criterion, each reported as a PASS/FAIL line."""
from __future__ import annotations

import itertools
import json
import math
import random
import time

import numpy as np
import pytest

from hand_traces import HAND_CASES
from helpers import tiny_model, trace_tuples, unit_table
from oracles import brute_force_placement_cost, exhaustive_best, flops_decode_ref, flops_prefill_ref

from stagesched.baselines import max_heuristic, min_heuristic
from stagesched.catalog import Catalog, ExecutionPlan, GpuTopology, ModelSpec
from stagesched.costmodel import (DECODE, PREFILL, CostTable, IterationDescriptor, ProfileSample,
                                  fit_coefficients, flops_decode, flops_prefill)
from stagesched.fixtures import (FIXTURES, Fixture, _full_table, _llm, ENSEMBLE_SPECS, chatglm_fixture,
                                 six_models_fixture, get_fixture, mixed_fixture)
from stagesched.graph import AppGraph, RequestSpec
from stagesched.placement import PlacementState, candidate_sets, place_stage, placement_is_feasible
from stagesched.planner import AppPlan, Stage, greedy_search
from stagesched.runtime import run_with_oracle
from stagesched.sampler import build_ecdf, sample_output_length
from stagesched.simulator import EngineConfig, SimRequest, simulate_model, simulate_stage

P = ExecutionPlan


def _report(n, ok, detail):
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")


# ---------------------------------------------------------------------------
# 1. FLOPs oracle
# ---------------------------------------------------------------------------

@pytest.mark.criterion(1, "FLOPs match the exact oracle on 1000 tuples, < 1 s")
def test_c01_flops_oracle():
    rng = random.Random(1)
    t0 = time.perf_counter()
    bad = 0
    for _ in range(1000):
        L, h, c = rng.randint(1, 96), rng.choice([512, 4096, 5120, 8192]), rng.randint(1, 10 ** 9)
        tp = rng.choice([1, 2, 4, 8])
        B, s, S = rng.randint(1, 256), rng.randint(1, 4096), rng.randint(1, 10 ** 6)
        m = ModelSpec("m", L, h, c, 8192, 1, 0, (1,))
        if flops_prefill(m, IterationDescriptor(PREFILL, B, s, 0), tp) != float(flops_prefill_ref(L, h, c, B, s, tp)):
            bad += 1
        if flops_decode(m, IterationDescriptor(DECODE, B, 0, S), tp) != float(flops_decode_ref(L, h, c, B, S, tp)):
            bad += 1
    dt = time.perf_counter() - t0
    _report(1, bad == 0 and dt < 1.0, f"{bad} mismatches, {dt:.3f} s")
    assert bad == 0
    assert dt < 1.0


# ---------------------------------------------------------------------------
# 2. coefficient fitting
# ---------------------------------------------------------------------------

def _synthetic_profile(noise, seed=2):
    rng = np.random.default_rng(seed)
    truth, samples = {}, []
    for mid, tp, phase, B in itertools.product(("a", "b"), (1, 2), ("comp", "prep", "samp"), (1, 8, 64)):
        a = float(rng.uniform(1e-6, 1e-3))
        xs = rng.uniform(10, 1000, 200)
        b = float(a * rng.uniform(100, 500))
        truth[(mid, tp, phase, B)] = (a, b)
        ys = a * xs + b
        if noise:
            ys = ys * (1 + rng.uniform(-noise, noise, len(xs)))
        samples += [ProfileSample(mid, tp, phase, B, float(x), float(y)) for x, y in zip(xs, ys)]
    return truth, samples


def _max_rel_err(truth, table):
    worst = 0.0
    for (mid, tp, phase, B), (a, b) in truth.items():
        fa, fb = table.coefficients[(mid, tp)][phase].entries[B]
        worst = max(worst, abs(fa - a) / abs(a), abs(fb - b) / abs(b))
    return worst


@pytest.mark.criterion(2, "coefficient refit: 1e-6 exact, 5e-2 with 5% noise, < 5 s")
def test_c02_fit_roundtrip():
    t0 = time.perf_counter()
    truth, samples = _synthetic_profile(0.0)
    err0 = _max_rel_err(truth, fit_coefficients(samples))
    truth, samples = _synthetic_profile(0.05)
    err5 = _max_rel_err(truth, fit_coefficients(samples))
    dt = time.perf_counter() - t0
    _report(2, err0 <= 1e-6 and err5 <= 5e-2 and dt < 5, f"exact {err0:.2e}, noisy {err5:.2e}, {dt:.2f} s")
    assert err0 <= 1e-6
    assert err5 <= 5e-2
    assert dt < 5.0


# ---------------------------------------------------------------------------
# 3. sampler
# ---------------------------------------------------------------------------

@pytest.mark.criterion(3, "sampler KS <= 0.01, cap dominance, byte-identical replay, < 10 s")
def test_c03_sampler():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    src = np.clip(np.round(rng.lognormal(5.0, 0.8, 5000)), 1, 4000).astype(int)
    ecdf = build_ecdf(src.tolist(), "m")
    n = 100_000
    draws = np.array([sample_output_length(ecdf, 10, 8192, None, 7, f"req-{i}") for i in range(n)])
    support = np.unique(src)
    src_cdf = np.searchsorted(np.sort(src), support, side="right") / len(src)
    smp_cdf = np.searchsorted(np.sort(draws), support, side="right") / n
    ks = float(np.max(np.abs(src_cdf - smp_cdf)))

    violations = 0
    prng = random.Random(3)
    for k in range(10_000):
        l_max = 4096
        l_in, cap = prng.randint(0, l_max), prng.randint(0, 2000)
        rid = f"cap-{k}"
        free = sample_output_length(ecdf, l_in, l_max, None, 11, rid)
        capped = sample_output_length(ecdf, l_in, l_max, cap, 11, rid)
        if not (capped <= cap and capped <= l_max - l_in and capped <= free and capped == min(free, cap)):
            violations += 1

    again = np.array([sample_output_length(ecdf, 10, 8192, None, 7, f"req-{i}") for i in range(n)])
    identical = draws.astype(np.int64).tobytes() == again.astype(np.int64).tobytes()
    dt = time.perf_counter() - t0
    _report(3, ks <= 0.01 and violations == 0 and identical and dt < 10,
            f"KS {ks:.4f}, {violations} cap violations, replay identical={identical}, {dt:.2f} s")
    assert ks <= 0.01
    assert violations == 0
    assert identical
    assert dt < 10.0


# ---------------------------------------------------------------------------
# 4. simulator
# ---------------------------------------------------------------------------

def _fuzz_case(rng):
    l_max = 24
    n = rng.randint(1, 12)
    reqs = []
    for i in range(n):
        inp = rng.randint(1, 10)
        reqs.append(SimRequest(f"q{i}", inp, rng.randint(1, l_max - inp),
                               ready_time=rng.choice([0.0, 0.0, rng.uniform(0, 20)])))
    return (tiny_model(l_max=l_max), reqs, rng.randint(1, 8), rng.randint(1, 3),
            rng.randint(l_max, 3 * l_max))


@pytest.mark.criterion(4, "simulator hand traces, 1e3 fuzz runs, truncate-and-resume at 20 cuts")
def test_c04_simulator():
    table = unit_table()
    hand_ok = 0
    kv_preempted = False
    for case in HAND_CASES:
        m = tiny_model(l_max=case.l_max)
        r = simulate_model(m, P(case.dp, 1), case.requests, table, EngineConfig(case.max_num_seqs),
                           kv_capacity=case.kv_capacity)
        got = sorted(trace_tuples(r.iteration_trace))
        if got == sorted(case.rows) and r.finish_times == case.finish:
            hand_ok += 1
        if case.kv_capacity is not None and any(k == "D" for _, k, *_ in case.rows):
            tr = r.iteration_trace
            kv_preempted |= bool(np.any(np.diff(tr.B[tr.kind == 1]) < 0))

    rng = random.Random(4)
    conservation = kv_safe = 0
    for _ in range(1000):
        m, reqs, mns, dp, cap = _fuzz_case(rng)
        r = simulate_model(m, P(dp, 1), reqs, table, EngineConfig(mns), kv_capacity=cap)
        tr = r.iteration_trace
        if r.done and len(r.finish_times) == len(reqs) and int(tr.B.sum()) == sum(q.out_len for q in reqs):
            conservation += 1
        dec = tr.kind == 1
        pre = tr.kind == 0
        if np.all(tr.S[dec] + tr.B[dec] <= cap) and np.all(tr.tokens[pre] + tr.B[pre] <= cap) \
                and np.all(tr.B <= mns):
            kv_safe += 1

    # a workload with preemptions, cut at 20 random points
    rng = random.Random(44)
    m = tiny_model(l_max=32)
    reqs = [SimRequest(f"t{i}", rng.randint(1, 12), rng.randint(1, 20), ready_time=rng.uniform(0, 5))
            for i in range(30)]
    cfg = EngineConfig(6)
    full = simulate_model(m, P(2, 1), reqs, table, cfg, kv_capacity=48)
    resumed_ok = 0
    for cut in sorted(rng.uniform(0, full.total_time) for _ in range(20)):
        first = simulate_model(m, P(2, 1), reqs, table, cfg, time_limit=cut, kv_capacity=48)
        rest = simulate_model(m, P(2, 1), reqs, table, cfg, resume=first, kv_capacity=48)
        a, b = full.iteration_trace, rest.iteration_trace
        order_a = np.lexsort((a.start, a.replica))
        order_b = np.lexsort((b.start, b.replica))
        same = all(np.array_equal(getattr(a, f)[order_a], getattr(b, f)[order_b])
                   for f in ("replica", "start", "latency", "kind", "B", "tokens", "S", "flops"))
        if same and rest.finish_times == full.finish_times and rest.total_time == full.total_time:
            resumed_ok += 1

    ok = hand_ok == 5 and kv_preempted and conservation == 1000 and kv_safe == 1000 and resumed_ok == 20
    _report(4, ok, f"hand traces {hand_ok}/5 (KV preemption seen={kv_preempted}), conservation "
                   f"{conservation}/1000, KV safety {kv_safe}/1000, resume {resumed_ok}/20")
    assert hand_ok == 5 and kv_preempted
    assert conservation == 1000 and kv_safe == 1000
    assert resumed_ok == 20


# ---------------------------------------------------------------------------
# 5. six-model fixture
# ---------------------------------------------------------------------------

@pytest.mark.criterion(5, "six-model fixture: greedy < Max, <= Min, within 5% of exhaustive optimum, < 60 s")
def test_c05_six_models():
    t0 = time.perf_counter()
    fx = six_models_fixture()
    g = greedy_search(fx.context())
    mx = max_heuristic(fx.context())
    mn = min_heuristic(fx.context())
    sym = [["m2", "m3", "m4", "m6"]]
    opt, _, plans, exhausted = exhaustive_best(fx.context(), math.inf, 100_000, sym)
    dt = time.perf_counter() - t0
    first = g.stages[0].entries
    shape = (len(g.stages) == 3 and len(first) == 4 and all(p.gpus_required == 1 for _, p in first)
             and "m1" not in dict(first)
             and all(s.plan_of("m1").gpus_required > 1 for s in g.stages[1:] if s.plan_of("m1")))
    ok = (g.total_latency < mx.total_latency and g.total_latency <= mn.total_latency
          and g.total_latency <= 1.05 * opt and exhausted and shape and dt < 60)
    _report(5, ok, f"greedy {g.total_latency:.4f}, max {mx.total_latency:.4f}, min {mn.total_latency:.4f}, "
                   f"optimum {opt:.4f} ({plans} complete plans), 3-stage shape={shape}, {dt:.2f} s")
    assert g.total_latency < mx.total_latency
    assert g.total_latency <= mn.total_latency
    assert exhausted and g.total_latency <= 1.05 * opt
    assert shape
    assert dt < 60.0


# ---------------------------------------------------------------------------
# 6. chatglm scaling
# ---------------------------------------------------------------------------

@pytest.mark.criterion(6, "chatglm: 48 s on 1 GPU, 32 s on 8; greedy prefers the linear model, < 30 s")
def test_c06_chatglm():
    t0 = time.perf_counter()
    fx = chatglm_fixture(with_competitor=False)
    ctx = fx.context()
    st = ctx.workload.initial_state()
    t1 = simulate_stage(ctx, st, [("glm", P(1, 1))], 0.0).duration
    t8 = simulate_stage(ctx, st, [("glm", P(8, 1))], 0.0).duration
    both = chatglm_fixture(with_competitor=True)
    plan = greedy_search(both.context())
    violations = 0
    for s, snap in zip(plan.stages, plan.snapshots):
        glm = s.plan_of("glm")
        if glm is not None and glm.gpus_required == 8 and not snap.node_finished("lin"):
            violations += 1
    dt = time.perf_counter() - t0
    ok = math.isclose(t1, 48.0, rel_tol=1e-9) and math.isclose(t8, 32.0, rel_tol=1e-9) and violations == 0 \
        and dt < 30
    _report(6, ok, f"1 GPU {t1:.6f} s, 8 GPUs {t8:.6f} s, ratio {t1 / t8:.3f}, "
                   f"{violations} stages giving chatglm 8 GPUs, {dt:.2f} s")
    assert math.isclose(t1, 48.0, rel_tol=1e-9)
    assert math.isclose(t8, 32.0, rel_tol=1e-9)
    assert violations == 0
    assert dt < 30.0


# ---------------------------------------------------------------------------
# 7. runtime
# ---------------------------------------------------------------------------

def _check_replay(plan: AppPlan, trace, N: int) -> list:
    """Problems found in one replay (empty when all invariants hold)."""
    problems = []
    st = trace.state
    if any(np.isnan(f).any() for f in st.finish.values()):
        problems.append("unfinished requests")
    per_gpu = {}
    for iv in trace.occupancy:
        per_gpu.setdefault(iv.gpu, []).append((iv.start, iv.end))
    for g, ivs in per_gpu.items():
        ivs.sort()
        if any(b[0] < a[1] - 1e-12 for a, b in zip(ivs, ivs[1:])):
            problems.append(f"GPU {g} double-booked")
    for seg in trace.segments:
        if sum(len(g) for reps in seg["placement"].values() for g in reps) > N:
            problems.append("overcommit")
    stages_seen = [seg["stage"] for seg in trace.segments]
    if any(b < a for a, b in zip(stages_seen, stages_seen[1:])):
        problems.append("stage index went backwards")
    adv = [e.stage for e in trace.events if e.kind == "stage_advanced" and e.detail != "fallback"]
    if adv != list(range(len(adv))):
        problems.append("stages skipped")
    if not trace.fallback_used:
        for seg in trace.segments:
            allowed = {(n, p.key()) for s in plan.stages[: seg["stage"] + 1] for n, p in s.entries}
            if any((e["node"], e["plan"]) not in allowed for e in seg["entries"]):
                problems.append("entry ran before its stage")
    # every entry of stage k started or finished before stage k+1 began
    started = set()
    finished = set()
    for e in trace.events:
        if e.kind == "model_started":
            started.add((e.node, e.plan))
        elif e.kind == "model_finished":
            finished.add(e.node)
        elif e.kind == "stage_advanced" and e.stage > 0 and e.detail != "fallback":
            for n, p in plan.stages[e.stage - 1].entries:
                if (n, p.key()) not in started and n not in finished:
                    problems.append(f"stage {e.stage} began before {n} of stage {e.stage - 1}")
    return problems


def _toy_app(lengths, plans, load=0.0):
    """Independent toy models, one request each, with the given output lengths."""
    ids = sorted(lengths)
    models = [tiny_model(m, l_max=64) for m in ids]
    table = CostTable()
    for m in ids:
        for pc in unit_table(m).coefficients[(m, 1)].values():
            table.set_phase(m, 1, pc)
    topo = GpuTopology(4, 1 << 34)
    for m in ids:
        for p in Catalog(models, topo).plans(m):
            table.set_loading_time(m, p, load)
    graph = AppGraph([(m, m) for m in ids])
    reqs = [RequestSpec(f"{m}-0", m, 1) for m in ids]
    fx = Fixture("toy", models, topo, table, graph, reqs, {m: build_ecdf([1], m) for m in ids})
    ctx = fx.context(lengths={f"{m}-0": n for m, n in lengths.items()})
    stages = [Stage(entries=[(n, P(*dp_tp)) for n, dp_tp in ents], first_finishers=ff,
                    planned_first_finisher=ff[0]) for ents, ff in plans]
    return ctx, AppPlan("hand", stages, 0.0)


def _events(trace):
    return [(e.time, e.kind, e.node, e.stage, e.detail) for e in trace.events]


@pytest.mark.criterion(7, "runtime: 100 perturbed replays keep invariants; misprediction example event-exact")
def test_c07_runtime():
    fx = six_models_fixture()
    plan = greedy_search(fx.context())
    assert len(plan.stages) == 3
    bad = []
    for k in range(100):
        rng = random.Random(700 + k)
        lengths = {r.id: rng.randint(1, 24) for r in fx.requests}
        tr = run_with_oracle(plan, fx.context(lengths=lengths))
        probs = _check_replay(plan, tr, fx.topo.num_gpus)
        if probs:
            bad.append((k, probs))

    lengths = {"M1": 10, "M2": 2, "M3": 6, "M4": 8, "M5": 3}
    e1 = ([("M1", (1, 1)), ("M2", (1, 1)), ("M3", (1, 1)), ("M4", (1, 1))], ["M1"])
    e3 = ([("M4", (1, 1))], ["M4"])
    # M5 takes two GPUs: no room is left for M4, which stops (rule iii)
    ctx, plan_a = _toy_app(lengths, [e1, ([("M2", (1, 1)), ("M3", (1, 1)), ("M5", (2, 1))], ["M5"]), e3])
    got_a = _events(run_with_oracle(plan_a, ctx))
    want_a = [
        (0.0, "stage_advanced", "", 0, "start"),
        (0.0, "model_started", "M1", 0, ""), (0.0, "model_started", "M2", 0, ""),
        (0.0, "model_started", "M3", 0, ""), (0.0, "model_started", "M4", 0, ""),
        (3.0, "model_finished", "M2", 0, ""),
        (3.0, "stage_advanced", "", 1, "misprediction"),
        (3.0, "model_kept_running", "M1", 1, ""),   # rule (i): in no later stage
        (3.0, "model_kept_running", "M3", 1, ""),   # rule (ii): same plan in the next stage
        (3.0, "model_stopped", "M4", 1, ""),        # rule (iii): no GPU left after the next stage
        (3.0, "model_started", "M5", 1, ""),
        (7.5, "model_finished", "M5", 1, ""),
        (7.5, "stage_advanced", "", 2, ""),
        (7.5, "model_kept_running", "M1", 2, ""), (7.5, "model_kept_running", "M3", 2, ""),
        (7.5, "model_started", "M4", 2, ""),
        (9.0, "model_finished", "M3", 2, ""), (15.0, "model_finished", "M1", 2, ""),
        (17.5, "model_finished", "M4", 2, ""),
    ]
    # M5 takes one GPU: M4 keeps running on the spare one (rule iii)
    ctx, plan_b = _toy_app(lengths, [e1, ([("M2", (1, 1)), ("M3", (1, 1)), ("M5", (1, 1))], ["M5"]), e3])
    got_b = _events(run_with_oracle(plan_b, ctx))
    want_b = [
        (0.0, "stage_advanced", "", 0, "start"),
        (0.0, "model_started", "M1", 0, ""), (0.0, "model_started", "M2", 0, ""),
        (0.0, "model_started", "M3", 0, ""), (0.0, "model_started", "M4", 0, ""),
        (3.0, "model_finished", "M2", 0, ""),
        (3.0, "stage_advanced", "", 1, "misprediction"),
        (3.0, "model_kept_running", "M1", 1, ""),
        (3.0, "model_kept_running", "M3", 1, ""),
        (3.0, "model_kept_running", "M4", 1, "gpus remain"),
        (3.0, "model_started", "M5", 1, ""),
        (7.5, "model_finished", "M5", 1, ""),
        (7.5, "stage_advanced", "", 2, ""),
        (7.5, "model_kept_running", "M1", 2, ""), (7.5, "model_kept_running", "M3", 2, ""),
        (7.5, "model_kept_running", "M4", 2, ""),
        (9.0, "model_finished", "M3", 2, ""), (12.0, "model_finished", "M4", 2, ""),
        (15.0, "model_finished", "M1", 2, ""),
    ]
    ok = not bad and got_a == want_a and got_b == want_b
    _report(7, ok, f"{100 - len(bad)}/100 perturbed replays clean, worked example stop-branch "
                   f"match={got_a == want_a}, keep-branch match={got_b == want_b}")
    assert not bad, bad[:3]
    assert got_a == want_a
    assert got_b == want_b


# ---------------------------------------------------------------------------
# 8. self-consistency
# ---------------------------------------------------------------------------

@pytest.mark.criterion(8, "oracle = planner samples gives measured total == planned total, all algorithms and fixtures")
def test_c08_self_consistency():
    rows = []
    for name in sorted(FIXTURES):
        fx = get_fixture(name)
        for algo, fn in (("greedy", greedy_search), ("max", max_heuristic), ("min", min_heuristic)):
            plan = fn(fx.context(seed=0))
            tr = run_with_oracle(plan, fx.context(seed=0))
            rows.append((name, algo, plan.total_latency, tr.total_time))
    bad = [r for r in rows if r[2] != r[3]]
    _report(8, not bad, f"{len(rows) - len(bad)}/{len(rows)} (fixture, algorithm) pairs exact")
    assert not bad, bad


# ---------------------------------------------------------------------------
# 9. preemption ablation
# ---------------------------------------------------------------------------

@pytest.mark.criterion(9, "mixed fixture: greedy <= greedy --no-preemption, min <= min --no-preemption")
def test_c09_preemption_ablation():
    fx = mixed_fixture()
    g = greedy_search(fx.context()).total_latency
    g_np = greedy_search(fx.context(), allow_preemption=False).total_latency
    m = min_heuristic(fx.context()).total_latency
    m_np = min_heuristic(fx.context(), allow_preemption=False).total_latency
    _report(9, g <= g_np and m <= m_np,
            f"greedy {g:.1f} vs {g_np:.1f} ({g_np / g:.2f}x), min {m:.1f} vs {m_np:.1f} ({m_np / m:.2f}x)")
    assert g <= g_np
    assert m <= m_np


# ---------------------------------------------------------------------------
# 10. placement
# ---------------------------------------------------------------------------

def _random_stage(rng, models, catalog, N, prev=None):
    entries, used = [], 0
    nodes = list(models)
    rng.shuffle(nodes)
    for n in nodes:
        if prev and n in prev and rng.random() < 0.5 and used + prev[n].gpus_required <= N:
            p = prev[n]
        else:
            opts = [p for p in catalog.plans(n) if used + p.gpus_required <= N]
            if not opts or rng.random() < 0.2:
                continue
            p = rng.choice(opts)
        entries.append((n, p))
        used += p.gpus_required
    return entries


@pytest.mark.criterion(10, "placement optimal vs brute force at N=4,8 (200 transitions), NVLink-feasible, tp=2 on pairs")
def test_c10_placement():
    mismatches = infeasible = 0
    total = 0
    for N in (4, 8):
        rng = random.Random(10 + N)
        topo = GpuTopology.pairs(N, 1 << 36)
        tps = (1, 2, 4, 8) if N == 8 else (1, 2, 4)
        models = [ModelSpec(f"x{k}", 1, 64, 1.0, 16, 1 << 20, 0, tps) for k in range(4)]
        catalog = Catalog(models, topo)
        table = CostTable()
        for m in models:
            for p in catalog.plans(m.id):
                table.set_loading_time(m.id, p, round(rng.uniform(1, 20), 2))
        for _ in range(100):
            prev_entries = _random_stage(rng, [m.id for m in models], catalog, N)
            prev, _, _ = place_stage(PlacementState.empty(N), prev_entries, topo, table)
            nxt = _random_stage(rng, [m.id for m in models], catalog, N, dict(prev_entries))
            if not nxt:
                nxt = prev_entries
            new, cost, moves = place_stage(prev, nxt, topo, table)
            want = brute_force_placement_cost(dict(prev.replicas), nxt, topo, table.loading_time)
            total += 1
            if not math.isclose(cost, want, rel_tol=1e-12, abs_tol=1e-12):
                mismatches += 1
            if not placement_is_feasible(new, topo):
                infeasible += 1
    topo4 = GpuTopology.pairs(4, 1 << 36)
    pair_sets = set(candidate_sets(topo4, 2))
    table = CostTable()
    table.set_loading_time("pair", P(1, 2), 1.0)
    table.set_loading_time("pair", P(2, 2), 1.0)
    table.set_loading_time("other", P(1, 1), 1.0)
    placed = set()
    for plan in (P(1, 2), P(2, 2)):
        st, _, _ = place_stage(PlacementState.empty(4), [("pair", plan)], topo4, table)
        placed |= set(st.replicas["pair"][1])
    blocked = PlacementState(4, {"other": (P(1, 1), ((0,),))})
    st, _, _ = place_stage(blocked, [("other", P(1, 1)), ("pair", P(1, 2))], topo4, table)
    placed |= set(st.replicas["pair"][1])
    pair_ok = pair_sets == {(0, 1), (2, 3)} and placed <= {(0, 1), (2, 3)}
    ok = mismatches == 0 and infeasible == 0 and total == 200 and pair_ok
    _report(10, ok, f"{total - mismatches}/{total} optimal, {infeasible} infeasible, tp=2 sets {sorted(placed)}")
    assert total == 200
    assert mismatches == 0
    assert infeasible == 0
    assert pair_ok


# ---------------------------------------------------------------------------
# 11. complexity
# ---------------------------------------------------------------------------

def _independent_app(V, N, seed):
    models = [_llm(mid, b, L, h) for mid, b, L, h in ENSEMBLE_SPECS[:V]]
    topo = GpuTopology.pairs(N, 80 * (1 << 30))
    table = _full_table(models, topo)
    rng = np.random.default_rng(seed)
    graph = AppGraph([(f"n{k}", m.id) for k, m in enumerate(models)])
    reqs = [RequestSpec(f"n{k}-{j}", f"n{k}", int(rng.integers(16, 200)))
            for k in range(V) for j in range(int(rng.integers(10, 60)))]
    ecdfs = {m.id: build_ecdf(rng.integers(10, 300, 200).tolist(), m.id) for m in models}
    return Fixture(f"indep{V}x{N}", models, topo, table, graph, reqs, ecdfs)


@pytest.mark.criterion(11, "greedy candidate evaluations <= 4*|V|^2*N^2")
def test_c11_complexity():
    worst = 0.0
    rows = []
    for V in range(2, 10):
        for N in (2, 4, 8):
            fx = _independent_app(V, N, 100 * V + N)
            plan = greedy_search(fx.context())
            ratio = plan.candidate_evaluations / (V * V * N * N)
            worst = max(worst, ratio)
            rows.append((V, N, plan.candidate_evaluations))
    for name in ("six_models", "chatglm_vs_linear", "chain_summary", "ensembling", "router"):
        fx = get_fixture(name)
        plan = greedy_search(fx.context())
        V, N = len(fx.graph.nodes), fx.topo.num_gpus
        worst = max(worst, plan.candidate_evaluations / (V * V * N * N))
    _report(11, worst <= 4, f"max evaluations / (|V|^2 N^2) = {worst:.3f} over {len(rows) + 5} fixtures")
    assert worst <= 4
