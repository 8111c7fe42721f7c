"""Replaying a stage plan against ground-truth output lengths.

Execution is split into segments that end whenever some running model
finishes.  At such an event the plan advances to its next stage and every
still-running model M with plan P is handled as follows:

* M appears in no later stage: it keeps running until it finishes.
* (M, P) is an entry of the next stage: it keeps running in place.
* M appears later but not in the next stage: it is stopped, unless the event
  was a misprediction (the planned first finisher is still running).  Then
  the next stage is scheduled first and M keeps running only if GPUs remain.

Next-stage entries that do not fit yet stay pending; the plan does not
advance again until all of them have started or their models finished.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .catalog import ExecutionPlan
from .errors import ConfigError, InfeasibleError, PlanMismatchError
from .graph import WorkloadState
from .placement import PlacementState
from .planner import AppPlan, Entry
from .simulator import IterationTrace, Segment, SimContext, commit_segment

logger = logging.getLogger(__name__)

EVENT_KINDS = ("model_started", "model_finished", "stage_advanced", "model_kept_running",
               "model_stopped", "placement_moved")


@dataclass(frozen=True)
class Event:
    time: float
    kind: str
    node: str = ""
    plan: str = ""
    stage: int = -1
    detail: str = ""

    def to_dict(self) -> dict:
        d = {"time": self.time, "event": self.kind, "stage": self.stage}
        if self.node:
            d["node"] = self.node
        if self.plan:
            d["plan"] = self.plan
        if self.detail:
            d["detail"] = self.detail
        return d


@dataclass
class GpuInterval:
    gpu: int
    start: float
    end: float
    node: str
    kind: str  # "load" or "run"


@dataclass
class RuntimeTrace:
    events: List[Event]
    total_time: float
    segments: List[dict]
    busy: List[GpuInterval]
    occupancy: List[GpuInterval]
    num_gpus: int
    generated_tokens: int = 0
    fallback_used: bool = False
    state: Optional[WorkloadState] = field(default=None, repr=False)
    # (node, iterations) per committed segment, for CSV dumps
    iterations: List[Tuple[str, IterationTrace]] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "format_version": 1,
            "total_time": self.total_time,
            "num_gpus": self.num_gpus,
            "generated_tokens": self.generated_tokens,
            "fallback_used": self.fallback_used,
            "events": [e.to_dict() for e in self.events],
            "segments": self.segments,
            "busy": [vars(b) for b in self.busy],
            "occupancy": [vars(o) for o in self.occupancy],
            "idle": gpu_idle_report(self),
        }


def _merge(intervals: Sequence[Tuple[float, float]]) -> List[Tuple[float, float]]:
    out: List[Tuple[float, float]] = []
    for s, e in sorted(intervals):
        if e <= s:
            continue
        if out and s <= out[-1][1]:
            if e > out[-1][1]:
                out[-1] = (out[-1][0], e)
        else:
            out.append((s, e))
    return out


def gpu_idle_report(trace: RuntimeTrace) -> dict:
    """Per-GPU idle seconds over [0, total_time] plus their sum."""
    per: Dict[int, List[Tuple[float, float]]] = {g: [] for g in range(trace.num_gpus)}
    for b in trace.busy:
        per[b.gpu].append((max(0.0, b.start), min(trace.total_time, b.end)))
    idle = {}
    for g, ivs in per.items():
        busy = sum(e - s for s, e in _merge(ivs))
        idle[g] = max(0.0, trace.total_time - busy)
    return {"per_gpu": {str(g): v for g, v in idle.items()}, "total": float(sum(idle.values()))}


class _Replay:
    def __init__(self, plan: AppPlan, ctx: SimContext):
        self.plan = plan
        self.ctx = ctx
        self.N = ctx.catalog.topo.num_gpus
        self.state = ctx.workload.initial_state()
        self.placement = PlacementState.empty(self.N)
        self.now = 0.0
        self.k = 0
        self.running: Dict[str, ExecutionPlan] = {}
        self.pending: List[Entry] = []
        self.events: List[Event] = []
        self.segments: List[dict] = []
        self.busy: List[GpuInterval] = []
        self.occupancy: List[GpuInterval] = []
        self.fallback_used = False
        self.iterations: List[Tuple[str, IterationTrace]] = []
        self.topo_index = ctx.topo_index

    # -- helpers -----------------------------------------------------------
    def emit(self, kind: str, node: str = "", plan: Optional[ExecutionPlan] = None, detail: str = ""):
        self.events.append(Event(self.now, kind, node, plan.key() if plan else "", self.k, detail))

    def used(self) -> int:
        return sum(p.gpus_required for p in self.running.values())

    def later_nodes(self, k: int) -> set:
        return {n for s in self.plan.stages[k:] for n, _ in s.entries}

    def can_start(self, node: str, plan: ExecutionPlan, finished: set) -> bool:
        if self.used() + plan.gpus_required > self.N:
            return False
        return all(p in finished or p in self.running for p in self.ctx.graph.predecessors(node))

    def schedule(self, entries: Sequence[Entry], finished: set) -> List[Entry]:
        """Start what fits (upstream first); return the entries left pending."""
        left = []
        for node, plan in sorted(entries, key=lambda e: self.topo_index[e[0]]):
            if node in finished or node in self.running:
                continue
            if self.can_start(node, plan, finished):
                self.running[node] = plan
            else:
                left.append((node, plan))
        return left

    # -- main loop ---------------------------------------------------------
    def run(self) -> RuntimeTrace:
        all_nodes = set(self.ctx.graph.node_ids)
        finished = self.state.finished_nodes()
        if self.plan.stages:
            self.pending = self.schedule(self.plan.stages[0].entries, finished)
            self.emit("stage_advanced", detail="start")
        guard = 0
        while not finished >= all_nodes:
            guard += 1
            if guard > 100 * (len(self.plan.stages) + len(all_nodes)) + 100:
                raise InfeasibleError("replay makes no progress")
            if not self.running:
                if self.pending:
                    self.pending = self.schedule(self.pending, finished)
                if not self.running and self.k + 1 < len(self.plan.stages):
                    self.advance(finished, set())
                    continue
                if not self.running:
                    self.fallback(finished)
                    continue
            self.step()
            just = set(self.last_finished)
            finished = self.state.finished_nodes()
            for n in self.last_finished:
                self.emit("model_finished", n, self.last_plans[n])
                self.running.pop(n, None)
            # started entries whose node finished without running are dropped
            for n in list(self.running):
                if n in finished:
                    self.running.pop(n)
            if self.pending:
                self.pending = self.schedule(self.pending, finished)
                continue
            if self.k + 1 < len(self.plan.stages):
                self.advance(finished, just)
        return RuntimeTrace(self.events, self.now, self.segments, self.busy, self.occupancy, self.N,
                            self.state.generated_total(), self.fallback_used, self.state, self.iterations)

    def step(self) -> None:
        entries = [(n, p) for n, p in self.running.items()]
        prev_place = self.placement
        seg = commit_segment(self.ctx, self.state, entries, self.now, prev_place)
        self.record(seg, prev_place)
        self.state = seg.state
        self.placement = seg.placement
        self.last_finished = list(seg.finished)
        self.last_plans = dict(seg.entries)
        self.now = seg.end

    def record(self, seg: Segment, prev_place: PlacementState) -> None:
        moved = {m.node for m in seg.moves}
        plans = dict(seg.entries)
        for m in seg.moves:
            old = prev_place.replicas.get(m.node)
            if m.src is not None and old is not None and old[0] == plans[m.node]:
                self.emit("placement_moved", m.node, plans[m.node],
                          f"replica {m.replica}: {list(m.src)} -> {list(m.dst)}")
        for node, plan in seg.entries:
            eng = self.state.engines.get(node)
            if node in moved or eng is None or eng.plan != plan:
                self.emit("model_started", node, plan)
        for node, plan in seg.entries:
            reps = seg.placement.replicas[node][1]
            load = seg.loaded.get(node, 0.0)
            for gpus in reps:
                for g in gpus:
                    self.occupancy.append(GpuInterval(g, seg.start, seg.end, node, "run"))
                    if load > 0:
                        self.busy.append(GpuInterval(g, seg.start, seg.start + load, node, "load"))
            tr = seg.traces[node]
            self.iterations.append((node, tr))
            if len(tr):
                ends = tr.end
                for r, gpus in enumerate(reps):
                    m = tr.replica == r
                    if not m.any():
                        continue
                    ivs = _merge(list(zip(tr.start[m].tolist(), ends[m].tolist())))
                    for g in gpus:
                        for s, e in ivs:
                            self.busy.append(GpuInterval(g, s, e, node, "run"))
        self.segments.append({
            "start": seg.start, "end": seg.end, "stage": self.k,
            "entries": [{"node": n, "plan": p.key()} for n, p in seg.entries],
            "placement": {n: [list(g) for g in reps] for n, (_, reps) in seg.placement.replicas.items()},
            "reload_cost": seg.reload_cost,
            "finished": list(seg.finished),
        })

    def advance(self, finished: set, just: set) -> None:
        """Move to the next planned stage, applying the keep/stop rules."""
        cur = self.plan.stages[self.k]
        planned_first = set(cur.first_finishers or ([cur.planned_first_finisher] if cur.planned_first_finisher else []))
        mispredicted = bool(just) and not (planned_first & just)
        self.k += 1
        nxt = self.plan.stages[self.k]
        nxt_plan = dict(nxt.entries)
        later = self.later_nodes(self.k)
        kept: Dict[str, ExecutionPlan] = {}
        conditional: List[Entry] = []
        for node, plan in sorted(self.running.items(), key=lambda e: self.topo_index[e[0]]):
            if nxt_plan.get(node) == plan:
                kept[node] = plan
            elif node not in later:
                kept[node] = plan
            elif node in nxt_plan:
                pass  # restarts with its next-stage plan
            elif mispredicted:
                conditional.append((node, plan))
            else:
                self.emit("model_stopped", node, plan)
        self.emit("stage_advanced", detail="misprediction" if mispredicted else "")
        for node, plan in kept.items():
            self.emit("model_kept_running", node, plan)
        stopped_for_replan = [n for n in self.running if n not in kept and n in nxt_plan]
        self.running = dict(kept)
        self.pending = self.schedule([(n, p) for n, p in nxt.entries if n not in kept], finished)
        for node, plan in conditional:
            if self.can_start(node, plan, finished):
                self.running[node] = plan
                self.emit("model_kept_running", node, plan, "gpus remain")
            else:
                self.emit("model_stopped", node, plan)
        for n in stopped_for_replan:
            if n not in self.running:
                self.emit("model_stopped", n, None, "waiting for next-stage plan")

    def fallback(self, finished: set) -> None:
        """Nothing runs and the plan is exhausted: start unfinished models on their last planned plan."""
        self.fallback_used = True
        last: Dict[str, ExecutionPlan] = {}
        for s in self.plan.stages:
            for n, p in s.entries:
                last[n] = p
        todo = [n for n in self.ctx.graph.topological_order() if n not in finished]
        missing = [n for n in todo if n not in last]
        if missing:
            raise PlanMismatchError(f"plan never schedules node(s) {missing}")
        self.pending = []
        for n in todo:
            if self.can_start(n, last[n], finished):
                self.running[n] = last[n]
        if not self.running:
            raise InfeasibleError(f"cannot start any of {todo}")
        self.emit("stage_advanced", detail="fallback")


def check_plan_covers(plan: AppPlan, ctx: SimContext) -> None:
    nodes = set(ctx.graph.node_ids)
    seen = set()
    for k, s in enumerate(plan.stages):
        for n, p in s.entries:
            if n not in nodes:
                raise PlanMismatchError(f"stage {k} references unknown node {n!r}")
            if p not in ctx.catalog.plans(ctx.graph.model_of[n]):
                raise PlanMismatchError(f"stage {k}: plan {p} is not valid for node {n!r}")
            seen.add(n)
    missing = [n for n in ctx.graph.node_ids if n not in seen and ctx.workload.nodes[n].n > 0]
    if missing:
        raise PlanMismatchError(f"plan does not cover node(s) {missing}")


def run_with_oracle(plan: AppPlan, ctx: SimContext) -> RuntimeTrace:
    """Replay ``plan`` on ``ctx``, whose workload carries the true output lengths."""
    check_plan_covers(plan, ctx)
    return _Replay(plan, ctx).run()
