from __future__ import annotations

import json
import random

import pytest

from stagesched.catalog import ExecutionPlan
from stagesched.errors import PlanMismatchError
from stagesched.fixtures import chain_summary_fixture, six_models_fixture
from stagesched.planner import AppPlan, Stage, greedy_search
from stagesched.baselines import min_heuristic
from stagesched.runtime import GpuInterval, RuntimeTrace, gpu_idle_report, run_with_oracle

P = ExecutionPlan


def test_replay_matches_plan_when_lengths_match():
    fx = chain_summary_fixture(n_docs=10)
    plan = greedy_search(fx.context(seed=3))
    tr = run_with_oracle(plan, fx.context(seed=3))
    assert tr.total_time == plan.total_latency
    assert not tr.fallback_used
    assert tr.generated_tokens == fx.context(seed=3).workload.total_output_tokens()


def test_longer_outputs_finish_through_fallback_or_plan():
    fx = six_models_fixture()
    plan = min_heuristic(fx.context())
    tr = run_with_oracle(plan, fx.context(lengths={r.id: 30 for r in fx.requests}))
    assert all(tr.state.node_finished(n) for n in fx.graph.node_ids)
    assert tr.total_time > plan.total_latency


def test_plan_for_other_app_is_a_mismatch():
    fx = six_models_fixture()
    bogus = AppPlan("greedy", [Stage([("nope", P(1, 1))])], 1.0)
    with pytest.raises(PlanMismatchError):
        run_with_oracle(bogus, fx.context())
    partial = AppPlan("greedy", [Stage([("m1", P(1, 1))])], 1.0)
    with pytest.raises(PlanMismatchError, match="cover"):
        run_with_oracle(partial, fx.context())


def test_idle_report():
    tr = RuntimeTrace([], 10.0, [], [GpuInterval(0, 0, 4, "a", "run"), GpuInterval(0, 3, 6, "a", "load"),
                                     GpuInterval(1, 2, 12, "b", "run")], [], 2)
    rep = gpu_idle_report(tr)
    assert rep["per_gpu"] == {"0": 4.0, "1": 2.0}
    assert rep["total"] == 6.0


def test_trace_dict_is_json_stable():
    fx = six_models_fixture()
    tr = run_with_oracle(greedy_search(fx.context()), fx.context())
    d = tr.to_dict()
    text = json.dumps(d, indent=2, sort_keys=True)
    assert json.dumps(json.loads(text), indent=2, sort_keys=True) == text
    kinds = {e["event"] for e in d["events"]}
    assert {"stage_advanced", "model_started", "model_finished"} <= kinds
