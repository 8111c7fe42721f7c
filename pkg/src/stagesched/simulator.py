"""Iteration-level simulation of FCFS continuous batching.

Times are absolute seconds on the application clock.  A model's engine is a
set of ``dp`` replicas; each replica batches its own requests, runs a prefill
iteration whenever the queue head fits (free slot and KV for prompt plus
generated prefix) and a decode iteration otherwise, preempting the most
recently admitted request when KV runs out.  Root requests are dealt to
replicas round-robin in (ready time, request order); a chain successor stays
on its predecessor's replica.

With a time limit, an engine stops before the first iteration that would end
past the limit.  Its state can be resumed later and the result equals one
uninterrupted run.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import _backend
from .catalog import Catalog, ExecutionPlan, ModelSpec
from .costmodel import CostTable
from .errors import ConfigError, InvalidStageError
from .graph import EngineSnapshot, NodeRequests, ReplicaSnapshot, Workload, WorkloadState, derive_request_lengths
from .placement import Move, PlacementState, place_stage

INF = math.inf
KIND_NAMES = ("prefill", "decode")


@dataclass(frozen=True)
class EngineConfig:
    max_num_seqs: int = 256
    # per-replica KV token capacity; None derives it from GPU memory
    kv_capacity_tokens: Optional[int] = None

    def __post_init__(self):
        if self.max_num_seqs < 1:
            raise ConfigError("max_num_seqs must be >= 1")
        if self.kv_capacity_tokens is not None and self.kv_capacity_tokens < 1:
            raise ConfigError("kv_capacity_tokens must be >= 1")


def kv_capacity_for(catalog: Catalog, cfg: EngineConfig, model_id: str, plan: ExecutionPlan) -> int:
    model = catalog[model_id]
    cap = cfg.kv_capacity_tokens if cfg.kv_capacity_tokens is not None else catalog.kv_capacity(model_id, plan)
    if cap < model.l_max:
        raise ConfigError(f"KV capacity {cap} for {model_id} {plan} is below max_seq_len {model.l_max}")
    return cap


# ---------------------------------------------------------------------------
# iteration traces
# ---------------------------------------------------------------------------

@dataclass
class IterationTrace:
    replica: np.ndarray
    start: np.ndarray
    latency: np.ndarray
    kind: np.ndarray
    B: np.ndarray
    tokens: np.ndarray   # B*s: prompt tokens for prefill, B for decode
    S: np.ndarray
    flops: np.ndarray

    @classmethod
    def from_columns(cls, cols) -> "IterationTrace":
        rep, start, lat, kind, B, T, S, F = cols
        return cls(np.asarray(rep, dtype=np.int64), np.asarray(start, dtype=np.float64),
                   np.asarray(lat, dtype=np.float64), np.asarray(kind, dtype=np.int8),
                   np.asarray(B, dtype=np.int64), np.asarray(T, dtype=np.float64),
                   np.asarray(S, dtype=np.float64), np.asarray(F, dtype=np.float64))

    @classmethod
    def empty(cls) -> "IterationTrace":
        return cls.from_columns(([], [], [], [], [], [], [], []))

    def __len__(self) -> int:
        return len(self.start)

    @property
    def end(self) -> np.ndarray:
        return self.start + self.latency

    def flops_until(self, t: float) -> float:
        return float(self.flops[self.end <= t].sum())

    def total_flops(self) -> float:
        return float(self.flops.sum())

    def concat(self, other: "IterationTrace") -> "IterationTrace":
        return IterationTrace(*(np.concatenate([getattr(self, f), getattr(other, f)])
                                for f in ("replica", "start", "latency", "kind", "B", "tokens", "S", "flops")))

    def rows(self) -> Iterable[tuple]:
        """(t_start, kind, B, s, S, flops, latency) rows for CSV dumps."""
        for k in range(len(self)):
            B = int(self.B[k])
            yield (float(self.start[k]), KIND_NAMES[self.kind[k]], B,
                   float(self.tokens[k]) / B if B else 0.0, float(self.S[k]),
                   float(self.flops[k]), float(self.latency[k]))

    def replica_rows(self, r: int) -> "IterationTrace":
        m = self.replica == r
        return IterationTrace(*(getattr(self, f)[m]
                                for f in ("replica", "start", "latency", "kind", "B", "tokens", "S", "flops")))


# ---------------------------------------------------------------------------
# node engine
# ---------------------------------------------------------------------------

@dataclass
class NodeRun:
    node: str
    plan: ExecutionPlan
    engine: EngineSnapshot
    generated: np.ndarray
    finish: np.ndarray
    ready: np.ndarray
    trace: IterationTrace
    done: bool
    start_time: float

    @property
    def completion(self) -> float:
        """Time the node's last request finished, inf if some are still open."""
        if len(self.finish) == 0:
            return self.start_time
        if np.isnan(self.finish).any():
            return INF
        return float(self.finish.max())


def advance_engine(
    nr: NodeRequests,
    model: ModelSpec,
    plan: ExecutionPlan,
    coef: np.ndarray,
    kv_cap: int,
    max_num_seqs: int,
    generated: np.ndarray,
    finish: np.ndarray,
    ready: np.ndarray,
    ext_ready: np.ndarray,
    engine: Optional[EngineSnapshot],
    start_time: float,
    time_limit: Optional[float] = None,
    backend: Optional[str] = None,
) -> NodeRun:
    """Run one node's engine from ``engine`` (or fresh at ``start_time``) until drained or ``time_limit``."""
    n = nr.n
    gen = np.array(generated, dtype=np.int64, copy=True)
    fin = np.array(finish, dtype=np.float64, copy=True)
    rdy = np.array(ready, dtype=np.float64, copy=True)
    ext = np.asarray(ext_ready, dtype=np.float64)
    if np.any(gen > nr.out_len):
        raise ConfigError(f"node {nr.node_id}: progress exceeds output length")

    if engine is None or engine.plan != plan:
        sticky = False
        clocks = [float(start_time)] * plan.dp
        running: List[list] = [[] for _ in range(plan.dp)]
        queues: List[list] = [[] for _ in range(plan.dp)]
        pendings: List[list] = [[] for _ in range(plan.dp)]
        assignment = np.full(n, -1, dtype=np.int64)
        rr = 0
    else:
        sticky = True
        clocks = [rep.clock for rep in engine.replicas]
        running = [list(rep.running) for rep in engine.replicas]
        queues = [list(rep.queue) for rep in engine.replicas]
        pendings = [list(rep.pending) for rep in engine.replicas]
        assignment = engine.assignment.copy()
        rr = engine.rr

    # newly available roots: unfinished, unassigned, inputs all known
    if n:
        intra = nr.intra_pred
        has_intra = intra >= 0
        while True:
            pred_fin = np.where(has_intra, fin[np.maximum(intra, 0)], 0.0)
            cand = np.isnan(fin) & (assignment < 0) & ~np.isnan(ext) & ~np.isnan(pred_fin)
            rt = np.maximum(ext, pred_fin)
            zero = cand & (nr.out_len <= gen)
            if not zero.any():
                break
            # nothing to generate: done as soon as the inputs are
            fin[zero] = rt[zero]
            rdy[zero] = rt[zero]
        idx = np.nonzero(cand)[0]
        if len(idx):
            order = idx[np.lexsort((nr.seq[idx], rt[idx]))]
            for i in order.tolist():
                p = int(intra[i])
                if sticky and p >= 0 and assignment[p] >= 0:
                    r = int(assignment[p])
                else:
                    r = rr % plan.dp
                    rr += 1
                assignment[i] = r
                rdy[i] = rt[i]
                pendings[r].append(i)

    sim = _backend.get_simulate(backend)
    limit = INF if time_limit is None else float(time_limit)
    cols, done = sim(coef, model.L, model.h, model.c, plan.tp, int(max_num_seqs), int(kv_cap),
                     nr.input_len, nr.out_len, nr.seq, gen, fin, rdy, ext,
                     nr.dep_ptr, nr.dep_idx, assignment,
                     clocks, running, queues, pendings, limit)
    snap = EngineSnapshot(
        plan=plan,
        replicas=[ReplicaSnapshot(float(clocks[r]), tuple(running[r]), tuple(queues[r]), tuple(pendings[r]))
                  for r in range(plan.dp)],
        assignment=assignment,
        rr=rr,
    )
    return NodeRun(nr.node_id, plan, snap, gen, fin, rdy, IterationTrace.from_columns(cols),
                   all(done), float(start_time))


# ---------------------------------------------------------------------------
# standalone single-model simulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimRequest:
    id: str
    input_len: int
    out_len: Optional[int]
    ready_time: float = 0.0
    after: Optional[str] = None  # same-model predecessor (chain step)


@dataclass
class ModelSnapshot:
    engine: EngineSnapshot
    generated: np.ndarray
    finish: np.ndarray
    ready: np.ndarray


@dataclass
class SimResult:
    total_time: float
    total_flops: float
    iteration_trace: IterationTrace
    finish_times: Dict[str, float]
    end_state: ModelSnapshot
    done: bool

    @property
    def running_counts(self) -> np.ndarray:
        return self.iteration_trace.B


def _standalone_requests(model: ModelSpec, requests: Sequence[SimRequest]) -> Tuple[NodeRequests, np.ndarray]:
    ids = [r.id for r in requests]
    pos = {rid: i for i, rid in enumerate(ids)}
    if len(pos) != len(ids):
        raise ConfigError("duplicate request ids")
    intra = np.full(len(ids), -1, dtype=np.int64)
    deps: List[List[int]] = [[] for _ in ids]
    for i, r in enumerate(requests):
        if r.out_len is None:
            raise ConfigError(f"request {r.id}: output length not sampled")
        if r.input_len > model.l_max:
            raise ConfigError(f"request {r.id}: input length {r.input_len} exceeds max_seq_len {model.l_max}")
        if r.input_len + r.out_len > model.l_max:
            raise ConfigError(f"request {r.id}: input + output exceeds max_seq_len {model.l_max}")
        if r.after is not None:
            if r.after not in pos or pos[r.after] >= i:
                raise ConfigError(f"request {r.id}: predecessor {r.after} must appear earlier")
            intra[i] = pos[r.after]
            deps[pos[r.after]].append(i)
    ptr = np.zeros(len(ids) + 1, dtype=np.int64)
    if ids:
        ptr[1:] = np.cumsum([len(d) for d in deps])
    nr = NodeRequests(
        node_id=model.id, ids=ids, seq=np.arange(len(ids), dtype=np.int64),
        input_len=np.array([r.input_len for r in requests], dtype=np.int64),
        out_len=np.array([r.out_len for r in requests], dtype=np.int64),
        intra_pred=intra, dep_ptr=ptr, dep_idx=np.array([j for d in deps for j in d], dtype=np.int64),
        ext_preds=[[] for _ in ids],
    )
    ext = np.array([float(r.ready_time) for r in requests], dtype=np.float64)
    return nr, ext


def simulate_model(
    model: ModelSpec,
    plan: ExecutionPlan,
    requests: Sequence[SimRequest],
    table: CostTable,
    cfg: EngineConfig,
    time_limit: Optional[float] = None,
    resume: Optional[SimResult] = None,
    kv_capacity: Optional[int] = None,
    backend: Optional[str] = None,
) -> SimResult:
    """Simulate one model under one plan on a fixed request list.

    KV capacity comes from ``kv_capacity``, else ``cfg.kv_capacity_tokens``,
    else it is unbounded.  Pass a previous result as ``resume`` to continue a
    run that stopped at its time limit.
    """
    nr, ext = _standalone_requests(model, requests)
    cap = kv_capacity if kv_capacity is not None else cfg.kv_capacity_tokens
    if cap is None:
        cap = 1 << 62
    if cap < model.l_max:
        raise ConfigError(f"KV capacity {cap} is below max_seq_len {model.l_max}")
    coef = table.dense(model.id, plan.tp)
    if resume is None:
        gen = np.zeros(nr.n, dtype=np.int64)
        fin = np.full(nr.n, np.nan)
        rdy = np.full(nr.n, np.nan)
        engine = None
    else:
        st = resume.end_state
        gen, fin, rdy, engine = st.generated, st.finish, st.ready, st.engine
    run = advance_engine(nr, model, plan, coef, cap, cfg.max_num_seqs, gen, fin, rdy, ext, engine,
                         0.0, time_limit, backend)
    trace = run.trace if resume is None else resume.iteration_trace.concat(run.trace)
    total = max([rep.clock for rep in run.engine.replicas] + [0.0])
    finish_times = {rid: float(run.finish[i]) for i, rid in enumerate(nr.ids) if not math.isnan(run.finish[i])}
    return SimResult(total, trace.total_flops(), trace, finish_times,
                     ModelSnapshot(run.engine, run.generated, run.finish, run.ready), run.done)


# ---------------------------------------------------------------------------
# stages over a shared workload
# ---------------------------------------------------------------------------

class SimContext:
    """Everything needed to simulate nodes of one application."""

    def __init__(self, catalog: Catalog, table: CostTable, cfg: EngineConfig, workload: Workload,
                 backend: Optional[str] = None):
        self.catalog = catalog
        self.table = table
        self.cfg = cfg
        self.workload = workload
        self.graph = workload.graph
        self.backend = backend
        self.topo_index = {n: i for i, n in enumerate(self.graph.topological_order())}
        for node in self.graph.node_ids:
            mid = self.graph.model_of[node]
            if mid not in catalog:
                raise ConfigError(f"node {node} uses unknown model {mid}")

    def model(self, node: str) -> ModelSpec:
        return self.catalog[self.graph.model_of[node]]

    def loading_time(self, node: str, plan: ExecutionPlan) -> float:
        return self.table.loading_time(self.graph.model_of[node], plan)

    def run_node(self, state: WorkloadState, node: str, plan: ExecutionPlan, start_time: float,
                 ext_ready: np.ndarray, engine: Optional[EngineSnapshot],
                 time_limit: Optional[float] = None) -> NodeRun:
        mid = self.graph.model_of[node]
        return advance_engine(
            self.workload.nodes[node], self.catalog[mid], plan, self.table.dense(mid, plan.tp),
            kv_capacity_for(self.catalog, self.cfg, mid, plan), self.cfg.max_num_seqs,
            state.generated[node], state.finish[node], state.ready[node], ext_ready,
            engine, start_time, time_limit, self.backend)

    def order_entries(self, entries: Sequence[Tuple[str, ExecutionPlan]]) -> List[Tuple[str, ExecutionPlan]]:
        return sorted(entries, key=lambda e: self.topo_index[e[0]])

    def check_stage(self, state: WorkloadState, entries: Sequence[Tuple[str, ExecutionPlan]]) -> None:
        nodes = [n for n, _ in entries]
        if len(set(nodes)) != len(nodes):
            raise InvalidStageError("a node appears twice in one stage")
        finished = state.finished_nodes()
        present = set(nodes)
        for n in nodes:
            if n not in self.graph.model_of:
                raise InvalidStageError(f"unknown node {n}")
            if n in finished:
                raise InvalidStageError(f"node {n} has already finished")
            for p in self.graph.predecessors(n):
                if p not in finished and p not in present:
                    raise InvalidStageError(f"node {n} depends on {p}, which is neither finished nor in the stage")
        used = sum(p.gpus_required for _, p in entries)
        if used > self.catalog.topo.num_gpus:
            raise InvalidStageError(f"stage uses {used} GPUs, more than {self.catalog.topo.num_gpus}")


@dataclass
class StageSim:
    """Full (untruncated) runs of one stage's entries."""
    start: float
    runs: Dict[str, NodeRun]
    loaded: Dict[str, float]       # node -> loading delay applied
    end: float                     # earliest completion over entries
    flops: float                   # FLOPs of iterations ending by ``end``
    first_finishers: List[str]

    @property
    def duration(self) -> float:
        return self.end - self.start

    @property
    def throughput(self) -> float:
        d = self.duration
        if d > 0:
            return self.flops / d
        return INF if self.flops > 0 else 0.0


def needs_load(state: WorkloadState, node: str, plan: ExecutionPlan) -> bool:
    eng = state.engines.get(node)
    return eng is None or eng.plan != plan


def simulate_stage(
    ctx: SimContext,
    state: WorkloadState,
    entries: Sequence[Tuple[str, ExecutionPlan]],
    start: float,
    reset: Iterable[str] = (),
    cache: Optional[dict] = None,
    time_limit: Optional[float] = None,
) -> StageSim:
    """Run every entry to completion, upstream before downstream.

    Entries that are new, change plan or appear in ``reset`` restart their
    engine after their loading time.  ``cache`` memoizes runs across
    candidates built on the same ``state``.
    """
    entries = ctx.order_entries(entries)
    ctx.check_stage(state, entries)
    reset = set(reset)
    plan_of = dict(entries)
    runs: Dict[str, NodeRun] = {}
    loaded: Dict[str, float] = {}
    keys: Dict[str, tuple] = {}
    for node, plan in entries:
        fresh = node in reset or needs_load(state, node, plan)
        ups = tuple(sorted((u, keys[u]) for u in ctx.workload.upstream_nodes(node) if u in plan_of))
        key = (node, plan, fresh, ups, time_limit)
        keys[node] = key
        loaded[node] = ctx.loading_time(node, plan) if fresh else 0.0
        if cache is not None and key in cache:
            runs[node] = cache[key]
            continue
        fin_view = {u: (runs[u].finish if u in runs else state.finish[u]) for u in ctx.workload.upstream_nodes(node)}
        ext = ctx.workload.ext_ready(node, fin_view)
        engine = None if fresh else state.engines[node]
        run = ctx.run_node(state, node, plan, start + loaded[node], ext, engine, time_limit)
        runs[node] = run
        if cache is not None:
            cache[key] = run
    if not entries:
        return StageSim(start, {}, {}, start, 0.0, [])
    completions = {n: runs[n].completion for n, _ in entries}
    end = min(completions.values())
    if time_limit is not None:
        end = min(end, time_limit)
    if end == INF:
        raise InvalidStageError("no entry of the stage can complete")
    flops = 0.0
    for n, _ in entries:
        flops += runs[n].trace.flops_until(end)
    first = [n for n, _ in entries if completions[n] == end]
    return StageSim(start, runs, loaded, end, flops, first)


@dataclass
class Segment:
    """One committed stretch of execution between two model-finish events."""
    start: float
    end: float
    entries: List[Tuple[str, ExecutionPlan]]
    placement: PlacementState
    reload_cost: float
    moves: List[Move]
    loaded: Dict[str, float]
    traces: Dict[str, IterationTrace]
    finished: List[str]
    flops: float
    state: WorkloadState

    @property
    def duration(self) -> float:
        return self.end - self.start


def commit_segment(
    ctx: SimContext,
    state: WorkloadState,
    entries: Sequence[Tuple[str, ExecutionPlan]],
    start: float,
    placement: PlacementState,
) -> Segment:
    """Place ``entries``, simulate until the first model finishes and advance the workload.

    Entries whose replicas placement moves are restarted with their loading
    time.  The returned state keeps partial progress of every request and the
    engines of the entries, ready to continue in the next segment.
    """
    entries = ctx.order_entries(entries)
    ctx.check_stage(state, entries)
    new_place, cost, moves = place_stage(placement, entries, ctx.catalog.topo, ctx.table,
                                         model_of=ctx.graph.model_of.__getitem__)
    moved = {m.node for m in moves}
    full = simulate_stage(ctx, state, entries, start, reset=moved)
    end = full.end

    # truncated runs at ``end``; downstream only sees upstream finishes by then
    new = state.copy()
    new.engines = {}
    traces: Dict[str, IterationTrace] = {}
    for node, plan in entries:
        fresh = node in moved or needs_load(state, node, plan)
        fin_view = {u: new.finish[u] for u in ctx.workload.upstream_nodes(node)}
        ext = ctx.workload.ext_ready(node, fin_view)
        engine = None if fresh else state.engines[node]
        run = ctx.run_node(state, node, plan, start + full.loaded[node], ext, engine, end)
        before = new.finish[node]
        newly = np.nonzero(np.isnan(before) & ~np.isnan(run.finish))[0]
        new.generated[node] = run.generated
        new.finish[node] = run.finish
        new.ready[node] = np.where(np.isnan(new.ready[node]), run.ready, new.ready[node])
        ids = ctx.workload.nodes[node].ids
        for i in newly.tolist():
            derive_request_lengths(ctx.workload, new, ids[i], float(run.finish[i]))
        if not new.node_finished(node):
            new.engines[node] = run.engine
        traces[node] = run.trace
    finished = [n for n, _ in entries if new.node_finished(n)]
    flops = sum(t.total_flops() for t in traces.values())
    return Segment(start, end, list(entries), new_place, cost, moves, dict(full.loaded), traces,
                   finished, flops, new)
