"""Greedy construction of execution stages.

A stage is a set of (node, plan) entries that run together until the first of
them finishes.  Stages are built by repeatedly adding a ready model, or giving
a model already in the stage a larger plan, choosing the change with the best
throughput gain per extra GPU.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .catalog import ExecutionPlan
from .errors import ConfigError, InfeasibleError
from .graph import WorkloadState, ready_models
from .placement import PlacementState
from .simulator import Segment, SimContext, commit_segment, simulate_stage

logger = logging.getLogger(__name__)

Entry = Tuple[str, ExecutionPlan]


@dataclass
class Stage:
    entries: List[Entry]
    start: float = 0.0
    planned_duration: float = 0.0
    planned_first_finisher: str = ""
    first_finishers: List[str] = field(default_factory=list)
    throughput: float = 0.0
    flops: float = 0.0
    reload_cost: float = 0.0
    placement: Dict[str, List[List[int]]] = field(default_factory=dict)
    model_ids: Dict[str, str] = field(default_factory=dict)

    @property
    def gpus_used(self) -> int:
        return sum(p.gpus_required for _, p in self.entries)

    @property
    def end(self) -> float:
        return self.start + self.planned_duration

    def plan_of(self, node: str) -> Optional[ExecutionPlan]:
        for n, p in self.entries:
            if n == node:
                return p
        return None

    def to_dict(self, model_of: Optional[Callable[[str], str]] = None) -> dict:
        return {
            "entries": [
                {"node": n, "model_id": model_of(n) if model_of else self.model_ids.get(n, n), "plan": p.key(),
                 "dp": p.dp, "tp": p.tp,
                 "gpus": self.placement.get(n, [])}
                for n, p in self.entries
            ],
            "start": self.start,
            "planned_duration": self.planned_duration,
            "planned_first_finisher": self.planned_first_finisher,
            "first_finishers": list(self.first_finishers),
            "gpus_used": self.gpus_used,
            "throughput": self.throughput,
            "flops": self.flops,
            "reload_cost": self.reload_cost,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Stage":
        try:
            entries = [(e["node"], ExecutionPlan.parse(e["plan"])) for e in d["entries"]]
            return cls(
                entries=entries,
                start=float(d.get("start", 0.0)),
                planned_duration=float(d.get("planned_duration", 0.0)),
                planned_first_finisher=d.get("planned_first_finisher", ""),
                first_finishers=list(d.get("first_finishers", [])),
                throughput=float(d.get("throughput", 0.0)),
                flops=float(d.get("flops", 0.0)),
                reload_cost=float(d.get("reload_cost", 0.0)),
                placement={e["node"]: e.get("gpus", []) for e in d["entries"]},
                model_ids={e["node"]: e.get("model_id", e["node"]) for e in d["entries"]},
            )
        except (KeyError, TypeError) as e:
            raise ConfigError(f"malformed stage: {e}") from None


@dataclass
class AppPlan:
    algorithm: str
    stages: List[Stage]
    total_latency: float
    allow_preemption: bool = True
    candidate_evaluations: int = 0
    planning_seconds: float = 0.0
    # per-stage starting workload and committed segments; in memory only
    snapshots: List[WorkloadState] = field(default_factory=list, repr=False)
    segments: List[Segment] = field(default_factory=list, repr=False)
    # report fields carried through (de)serialization untouched
    extra: Dict[str, object] = field(default_factory=dict)

    _KEYS = ("format_version", "algorithm", "allow_preemption", "total_latency", "planning_seconds",
             "candidate_evaluations", "stages")

    def to_dict(self, model_of: Optional[Callable[[str], str]] = None, extra: Optional[dict] = None) -> dict:
        d = {
            "format_version": 1,
            "algorithm": self.algorithm,
            "allow_preemption": self.allow_preemption,
            "total_latency": self.total_latency,
            "planning_seconds": self.planning_seconds,
            "candidate_evaluations": self.candidate_evaluations,
            "stages": [s.to_dict(model_of) for s in self.stages],
        }
        d.update(self.extra)
        if extra:
            d.update(extra)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AppPlan":
        if d.get("format_version", 1) != 1:
            raise ConfigError(f"unsupported plan format_version {d.get('format_version')}")
        try:
            return cls(
                algorithm=d.get("algorithm", "greedy"),
                stages=[Stage.from_dict(s) for s in d["stages"]],
                total_latency=float(d["total_latency"]),
                allow_preemption=bool(d.get("allow_preemption", True)),
                candidate_evaluations=int(d.get("candidate_evaluations", 0)),
                planning_seconds=float(d.get("planning_seconds", 0.0)),
                extra={k: v for k, v in d.items() if k not in cls._KEYS},
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"malformed plan: {e}") from None

    def dumps(self, model_of=None, extra=None) -> str:
        return json.dumps(self.to_dict(model_of, extra), indent=2, sort_keys=True) + "\n"


def stage_metrics(ctx: SimContext, state: WorkloadState, entries: Sequence[Entry], start: float,
                  cache: Optional[dict] = None) -> Tuple[float, float, float]:
    """(t_E, FLOPs_E, throughput) of a candidate stage starting at ``start``."""
    sim = simulate_stage(ctx, state, entries, start, cache=cache)
    return sim.duration, sim.flops, sim.throughput


class EvalCounter:
    def __init__(self):
        self.count = 0


# chooser(ctx, state, start, finished, started, counter) -> entries of the next stage
Chooser = Callable[[SimContext, WorkloadState, float, set, Dict[str, ExecutionPlan], EvalCounter], List[Entry]]


def run_stages(ctx: SimContext, choose: Chooser, algorithm: str, allow_preemption: bool = True) -> AppPlan:
    """Drive stage construction and commitment until every node finishes."""
    t0 = time.perf_counter()
    state = ctx.workload.initial_state()
    placement = PlacementState.empty(ctx.catalog.topo.num_gpus)
    start = 0.0
    stages: List[Stage] = []
    snaps: List[WorkloadState] = []
    segments: List[Segment] = []
    started: Dict[str, ExecutionPlan] = {}
    counter = EvalCounter()
    all_nodes = set(ctx.graph.node_ids)
    guard = 0
    while True:
        finished = state.finished_nodes()
        if finished >= all_nodes:
            break
        guard += 1
        if guard > 10 * len(all_nodes) + 10:
            raise InfeasibleError("stage construction makes no progress")
        entries = choose(ctx, state, start, finished, started, counter)
        if not entries:
            raise InfeasibleError("no model can be scheduled on the available GPUs")
        seg = commit_segment(ctx, state, entries, start, placement)
        first = [n for n in seg.finished]
        stage = Stage(
            entries=list(seg.entries),
            start=start,
            planned_duration=seg.end - start,
            planned_first_finisher=first[0] if first else "",
            first_finishers=first,
            flops=seg.flops,
            throughput=(seg.flops / (seg.end - start)) if seg.end > start else 0.0,
            reload_cost=seg.reload_cost,
            placement={n: [list(g) for g in reps] for n, (_, reps) in seg.placement.replicas.items()},
            model_ids={n: ctx.graph.model_of[n] for n, _ in seg.entries},
        )
        logger.debug("stage %d: %s, %.4gs", len(stages), [(n, str(p)) for n, p in stage.entries],
                     stage.planned_duration)
        snaps.append(state)
        segments.append(seg)
        stages.append(stage)
        for n, p in seg.entries:
            started.setdefault(n, p)
        state = seg.state
        placement = seg.placement
        start = seg.end
    return AppPlan(algorithm, stages, start, allow_preemption, counter.count,
                   time.perf_counter() - t0, snaps, segments)


def _gpus(entries: Sequence[Entry]) -> int:
    return sum(p.gpus_required for _, p in entries)


def greedy_choose(allow_preemption: bool = True) -> Chooser:
    def choose(ctx, state, start, finished, started, counter):
        N = ctx.catalog.topo.num_gpus
        order = {n: i for i, n in enumerate(ctx.graph.node_ids)}
        cache: dict = {}
        forced: List[Entry] = []
        if not allow_preemption:
            forced = [(n, p) for n, p in started.items() if n not in finished]
        fixed = {n for n, _ in forced}
        current: List[Entry] = list(forced)
        cur_T = 0.0
        if current:
            counter.count += 1
            cur_T = stage_metrics(ctx, state, current, start, cache)[2]
        while True:
            in_stage = {n for n, _ in current}
            ready = ready_models(ctx.graph, finished, in_stage) - fixed
            used = _gpus(current)
            best = None
            for node in sorted(ready, key=order.get):
                mid = ctx.graph.model_of[node]
                for plan in ctx.catalog.plans(mid):
                    if node in in_stage:
                        old = dict(current)[node]
                        new_gpus = used - old.gpus_required + plan.gpus_required
                        if not (used < new_gpus <= N):
                            continue
                        cand = [(n, plan if n == node else p) for n, p in current]
                    else:
                        new_gpus = used + plan.gpus_required
                        if new_gpus > N:
                            continue
                        cand = current + [(node, plan)]
                    counter.count += 1
                    T = stage_metrics(ctx, state, cand, start, cache)[2]
                    dT = T - cur_T
                    dN = new_gpus - used
                    key = (dT / dN, -dN, -order[node])
                    if best is None or key > best[0]:
                        best = (key, cand, T, dT)
            if best is None:
                break
            if best[3] < 0:
                break
            current, cur_T = best[1], best[2]
        return current

    return choose


def greedy_search(ctx: SimContext, allow_preemption: bool = True) -> AppPlan:
    """Stage-by-stage greedy search over (model, plan) choices."""
    return run_stages(ctx, greedy_choose(allow_preemption), "greedy", allow_preemption)
