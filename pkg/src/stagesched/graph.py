"""Application computation graph, request dependencies and workload progress."""
from __future__ import annotations

import math
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from .errors import ConfigError

CONCAT, INDEPENDENT, FILTER_FINAL = "concat", "independent", "filter_final"
EDGE_MODES = (CONCAT, INDEPENDENT, FILTER_FINAL)
ADD_OUTPUT_LEN, NO_TRANSFER = "add_output_len", "none"


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    mode: str = CONCAT
    overhead_tokens: int = 0

    def __post_init__(self):
        if self.mode not in EDGE_MODES:
            raise ConfigError(f"edge {self.src}->{self.dst}: unknown mode {self.mode!r}")
        if self.overhead_tokens < 0:
            raise ConfigError(f"edge {self.src}->{self.dst}: negative overhead")


@dataclass
class AppGraph:
    nodes: List[Tuple[str, str]]
    edges: List[Edge] = field(default_factory=list)
    # overhead of self-loops removed by fuse_self_loops, keyed by node
    fused_loops: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.nodes = [(str(n), str(m)) for n, m in self.nodes]
        ids = [n for n, _ in self.nodes]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate node ids in application graph")
        self.model_of: Dict[str, str] = dict(self.nodes)
        self.index: Dict[str, int] = {n: i for i, n in enumerate(ids)}
        for e in self.edges:
            if e.src not in self.model_of or e.dst not in self.model_of:
                raise ConfigError(f"edge {e.src}->{e.dst} references unknown node")

    @property
    def node_ids(self) -> List[str]:
        return [n for n, _ in self.nodes]

    def edge(self, src: str, dst: str) -> Optional[Edge]:
        for e in self.edges:
            if e.src == src and e.dst == dst:
                return e
        return None

    def predecessors(self, node: str) -> List[str]:
        return sorted({e.src for e in self.edges if e.dst == node and e.src != node}, key=self.index.get)

    def successors(self, node: str) -> List[str]:
        return sorted({e.dst for e in self.edges if e.src == node and e.dst != node}, key=self.index.get)

    def has_self_loops(self) -> bool:
        return any(e.src == e.dst for e in self.edges)

    def self_loop_overhead(self, node: str) -> Optional[int]:
        if node in self.fused_loops:
            return self.fused_loops[node]
        e = self.edge(node, node)
        return None if e is None else e.overhead_tokens

    def topological_order(self) -> List[str]:
        """Kahn's algorithm, ties broken by node order; raises on cycles."""
        indeg = {n: 0 for n in self.model_of}
        for e in self.edges:
            indeg[e.dst] += 1
        ready = sorted((n for n, d in indeg.items() if d == 0), key=self.index.get)
        out = []
        q = deque(ready)
        while q:
            n = q.popleft()
            out.append(n)
            for e in self.edges:
                if e.src == n:
                    indeg[e.dst] -= 1
                    if indeg[e.dst] == 0:
                        q.append(e.dst)
        if len(out) != len(indeg):
            raise ConfigError("application graph has a cycle")
        return out

    def to_dict(self) -> dict:
        return {
            "format_version": 1,
            "nodes": [{"id": n, "model_id": m} for n, m in self.nodes],
            "edges": [{"src": e.src, "dst": e.dst, "mode": e.mode, "overhead_tokens": e.overhead_tokens}
                      for e in self.edges],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AppGraph":
        try:
            nodes = [(n["id"], n["model_id"]) for n in d["nodes"]]
            edges = [Edge(e["src"], e["dst"], e.get("mode", CONCAT), int(e.get("overhead_tokens", 0)))
                     for e in d.get("edges", [])]
        except (KeyError, TypeError) as e:
            raise ConfigError(f"malformed app graph: {e}") from None
        return cls(nodes, edges)


def fuse_self_loops(g: AppGraph) -> AppGraph:
    """Drop self-loop edges, remembering their overhead for chain requests.

    Cycles through distinct nodes are rejected.
    """
    loops = dict(g.fused_loops)
    kept = []
    for e in g.edges:
        if e.src == e.dst:
            loops[e.src] = e.overhead_tokens
        else:
            kept.append(e)
    fused = AppGraph(list(g.nodes), kept, loops)
    try:
        fused.topological_order()
    except ConfigError:
        raise ConfigError("application graph has a cycle between distinct nodes; only self-loops are supported") from None
    return fused


def ready_models(g: AppGraph, finished: Set[str], selected_in_stage: Set[str]) -> Set[str]:
    done = set(finished) | set(selected_in_stage)
    return {n for n in g.model_of if n not in finished and all(p in done for p in g.predecessors(n))}


# ---------------------------------------------------------------------------
# requests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RequestSpec:
    id: str
    node_id: str
    base_input_len: int
    predecessors: Tuple[Tuple[str, str], ...] = ()
    cap: Optional[int] = None

    def __post_init__(self):
        if self.base_input_len < 0:
            raise ConfigError(f"request {self.id}: negative base_input_len")
        preds = tuple((str(r), str(t)) for r, t in self.predecessors)
        for _, t in preds:
            if t not in (ADD_OUTPUT_LEN, NO_TRANSFER):
                raise ConfigError(f"request {self.id}: unknown length transfer {t!r}")
        object.__setattr__(self, "predecessors", preds)

    @property
    def ready(self) -> bool:
        return not self.predecessors

    def to_dict(self) -> dict:
        d = {"id": self.id, "node_id": self.node_id, "base_input_len": self.base_input_len,
             "predecessors": [[r, t] for r, t in self.predecessors]}
        if self.cap is not None:
            d["cap"] = self.cap
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RequestSpec":
        try:
            preds = []
            for p in d.get("predecessors", []):
                if isinstance(p, str):
                    preds.append((p, ADD_OUTPUT_LEN))
                elif isinstance(p, dict):
                    preds.append((p["request_id"], p.get("length_transfer", ADD_OUTPUT_LEN)))
                else:
                    preds.append((p[0], p[1]))
            return cls(str(d["id"]), str(d["node_id"]), int(d["base_input_len"]), tuple(preds),
                       None if d.get("cap") is None else int(d["cap"]))
        except (KeyError, TypeError, IndexError) as e:
            raise ConfigError(f"malformed request entry: {e}") from None


def requests_to_dict(requests: Sequence[RequestSpec]) -> dict:
    return {"format_version": 1, "requests": [r.to_dict() for r in requests]}


def requests_from_dict(d) -> List[RequestSpec]:
    if isinstance(d, dict):
        d = d.get("requests", [])
    return [RequestSpec.from_dict(r) for r in d]


def validate_requests(g: AppGraph, requests: Sequence[RequestSpec]) -> None:
    """Check request dependencies against the (fused) graph."""
    by_id: Dict[str, RequestSpec] = {}
    for r in requests:
        if r.id in by_id:
            raise ConfigError(f"duplicate request id {r.id}")
        if r.node_id not in g.model_of:
            raise ConfigError(f"request {r.id} targets unknown node {r.node_id}")
        by_id[r.id] = r
    has_succ_same_node: Set[str] = set()
    for r in requests:
        intra = 0
        per_edge: Dict[str, int] = defaultdict(int)
        for pid, _ in r.predecessors:
            p = by_id.get(pid)
            if p is None:
                raise ConfigError(f"request {r.id}: dangling predecessor {pid}")
            if p.node_id == r.node_id:
                if g.self_loop_overhead(r.node_id) is None:
                    raise ConfigError(f"request {r.id}: same-node predecessor but node {r.node_id} has no self-loop")
                intra += 1
                has_succ_same_node.add(pid)
            else:
                if g.edge(p.node_id, r.node_id) is None:
                    raise ConfigError(f"request {r.id}: no edge {p.node_id}->{r.node_id} for predecessor {pid}")
                per_edge[p.node_id] += 1
        if intra > 1:
            raise ConfigError(f"request {r.id}: at most one same-node predecessor is supported")
        for src, cnt in per_edge.items():
            if g.edge(src, r.node_id).mode == INDEPENDENT and cnt > 1:
                raise ConfigError(f"request {r.id}: independent edge {src}->{r.node_id} feeds one output per request")
    # filter_final consumers may only read the last request of a chain
    for r in requests:
        for pid, _ in r.predecessors:
            p = by_id[pid]
            if p.node_id != r.node_id and g.edge(p.node_id, r.node_id).mode == FILTER_FINAL:
                if pid in has_succ_same_node:
                    raise ConfigError(f"request {r.id}: filter_final edge reads non-final chain request {pid}")
    # acyclic at request level
    indeg = {r.id: len(r.predecessors) for r in requests}
    succ: Dict[str, List[str]] = defaultdict(list)
    for r in requests:
        for pid, _ in r.predecessors:
            succ[pid].append(r.id)
    q = deque(k for k, v in indeg.items() if v == 0)
    seen = 0
    while q:
        k = q.popleft()
        seen += 1
        for s in succ[k]:
            indeg[s] -= 1
            if indeg[s] == 0:
                q.append(s)
    if seen != len(requests):
        raise ConfigError("request predecessor links contain a cycle")


def derived_input_length(spec: RequestSpec, out_lens: Mapping[str, int], overheads: Mapping[str, int]) -> int:
    """base + sum over length-transferring predecessors of (output length + edge overhead)."""
    total = spec.base_input_len
    for pid, transfer in spec.predecessors:
        if transfer == ADD_OUTPUT_LEN:
            total += out_lens[pid] + overheads[pid]
    return total


# ---------------------------------------------------------------------------
# workload: static lengths + mutable progress
# ---------------------------------------------------------------------------

@dataclass
class NodeRequests:
    """Static per-node request arrays, indexed by local position (seq order)."""
    node_id: str
    ids: List[str]
    seq: np.ndarray            # global order, int64
    input_len: np.ndarray      # int64
    out_len: np.ndarray        # int64
    intra_pred: np.ndarray     # local index of same-node predecessor or -1
    dep_ptr: np.ndarray        # CSR of same-node dependents
    dep_idx: np.ndarray
    ext_preds: List[List[str]]  # predecessors on other nodes (request ids)

    @property
    def n(self) -> int:
        return len(self.ids)


class Workload:
    """All requests of an application with resolved input/output lengths.

    ``length_fn(spec, input_len)`` returns the output length for a request once
    its input length is known; requests are resolved in dependency order.
    """

    def __init__(self, graph: AppGraph, requests: Sequence[RequestSpec],
                 length_fn: Callable[[RequestSpec, int], int], l_max: Mapping[str, int]):
        if graph.has_self_loops():
            graph = fuse_self_loops(graph)
        validate_requests(graph, requests)
        self.graph = graph
        self.specs: Dict[str, RequestSpec] = {r.id: r for r in requests}
        self.order: List[str] = [r.id for r in requests]
        self.seq: Dict[str, int] = {rid: i for i, rid in enumerate(self.order)}
        self.dependents: Dict[str, List[str]] = defaultdict(list)
        for r in requests:
            for pid, _ in r.predecessors:
                self.dependents[pid].append(r.id)

        self.input_len: Dict[str, int] = {}
        self.out_len: Dict[str, int] = {}
        self.overhead: Dict[str, Dict[str, int]] = {}
        for rid in self._request_topo_order():
            spec = self.specs[rid]
            ovh = {}
            for pid, _ in spec.predecessors:
                src = self.specs[pid].node_id
                if src == spec.node_id:
                    ovh[pid] = graph.self_loop_overhead(src) or 0
                else:
                    ovh[pid] = graph.edge(src, spec.node_id).overhead_tokens
            self.overhead[rid] = ovh
            l_in = derived_input_length(spec, self.out_len, ovh)
            lm = l_max[graph.model_of[spec.node_id]]
            if l_in > lm:
                raise ConfigError(f"request {rid}: input length {l_in} exceeds max_seq_len {lm}")
            out = int(length_fn(spec, l_in))
            self.input_len[rid] = l_in
            self.out_len[rid] = max(0, min(out, lm - l_in))

        self.nodes: Dict[str, NodeRequests] = {}
        for nid in graph.node_ids:
            ids = [rid for rid in self.order if self.specs[rid].node_id == nid]
            local = {rid: i for i, rid in enumerate(ids)}
            intra = np.full(len(ids), -1, dtype=np.int64)
            ext: List[List[str]] = []
            deps: List[List[int]] = [[] for _ in ids]
            for i, rid in enumerate(ids):
                e = []
                for pid, _ in self.specs[rid].predecessors:
                    if pid in local:
                        intra[i] = local[pid]
                        deps[local[pid]].append(i)
                    else:
                        e.append(pid)
                ext.append(e)
            ptr = np.zeros(len(ids) + 1, dtype=np.int64)
            ptr[1:] = np.cumsum([len(d) for d in deps]) if ids else []
            idx = np.array([j for d in deps for j in d], dtype=np.int64)
            self.nodes[nid] = NodeRequests(
                node_id=nid, ids=ids,
                seq=np.array([self.seq[r] for r in ids], dtype=np.int64),
                input_len=np.array([self.input_len[r] for r in ids], dtype=np.int64),
                out_len=np.array([self.out_len[r] for r in ids], dtype=np.int64),
                intra_pred=intra, dep_ptr=ptr, dep_idx=idx, ext_preds=ext,
            )
        self.local: Dict[str, Tuple[str, int]] = {
            rid: (nid, i) for nid, nr in self.nodes.items() for i, rid in enumerate(nr.ids)}
        # per node: predecessor node -> (request positions, predecessor positions)
        self._ext_groups: Dict[str, Dict[str, Tuple[np.ndarray, np.ndarray]]] = {}
        for nid, nr in self.nodes.items():
            groups: Dict[str, Tuple[list, list]] = {}
            for i, preds in enumerate(nr.ext_preds):
                for pid in preds:
                    pn, pi = self.local[pid]
                    g = groups.setdefault(pn, ([], []))
                    g[0].append(i)
                    g[1].append(pi)
            self._ext_groups[nid] = {pn: (np.array(a, dtype=np.int64), np.array(b, dtype=np.int64))
                                     for pn, (a, b) in groups.items()}

    def ext_ready(self, node: str, finish: Mapping[str, np.ndarray]) -> np.ndarray:
        """Latest finish among each request's other-node predecessors.

        0.0 when there are none, NaN while any of them is unfinished.
        """
        out = np.zeros(self.nodes[node].n)
        with np.errstate(invalid="ignore"):  # NaN (unfinished) propagates on purpose
            for pn, (idx, pidx) in self._ext_groups[node].items():
                np.maximum.at(out, idx, finish[pn][pidx])
        return out

    def upstream_nodes(self, node: str) -> List[str]:
        return list(self._ext_groups[node])

    def _request_topo_order(self) -> List[str]:
        indeg = {rid: len(self.specs[rid].predecessors) for rid in self.order}
        q = deque(rid for rid in self.order if indeg[rid] == 0)
        out = []
        while q:
            rid = q.popleft()
            out.append(rid)
            for d in self.dependents.get(rid, ()):
                indeg[d] -= 1
                if indeg[d] == 0:
                    q.append(d)
        return out

    def model_of(self, node: str) -> str:
        return self.graph.model_of[node]

    def total_output_tokens(self) -> int:
        return sum(self.out_len.values())

    def initial_state(self) -> "WorkloadState":
        st = WorkloadState(
            generated={n: np.zeros(nr.n, dtype=np.int64) for n, nr in self.nodes.items()},
            finish={n: np.full(nr.n, np.nan) for n, nr in self.nodes.items()},
            ready={n: np.full(nr.n, np.nan) for n, nr in self.nodes.items()},
        )
        for rid in self.order:
            if not self.specs[rid].predecessors:
                self._mark_ready(st, rid, 0.0)
        return st

    def _mark_ready(self, st: "WorkloadState", rid: str, t: float) -> None:
        nid, i = self.local[rid]
        st.ready[nid][i] = t
        if self.out_len[rid] == 0 and math.isnan(st.finish[nid][i]):
            # nothing to generate: done the moment its inputs exist
            derive_request_lengths(self, st, rid, t)


@dataclass
class ReplicaSnapshot:
    clock: float
    running: Tuple[int, ...]
    queue: Tuple[int, ...]
    pending: Tuple[int, ...]


@dataclass
class EngineSnapshot:
    """Engine state of one loaded model, enough to resume it exactly."""
    plan: object
    replicas: List[ReplicaSnapshot]
    assignment: np.ndarray   # replica per local request, -1 if not yet assigned
    rr: int


@dataclass
class WorkloadState:
    generated: Dict[str, np.ndarray]
    finish: Dict[str, np.ndarray]
    ready: Dict[str, np.ndarray]
    engines: Dict[str, EngineSnapshot] = field(default_factory=dict)

    def copy(self) -> "WorkloadState":
        return WorkloadState(
            generated={k: v.copy() for k, v in self.generated.items()},
            finish={k: v.copy() for k, v in self.finish.items()},
            ready={k: v.copy() for k, v in self.ready.items()},
            engines=dict(self.engines),
        )

    def node_finished(self, node: str) -> bool:
        return not np.isnan(self.finish[node]).any()

    def finished_nodes(self) -> Set[str]:
        return {n for n in self.finish if self.node_finished(n)}

    def unfinished_count(self, node: str) -> int:
        return int(np.isnan(self.finish[node]).sum())

    def generated_total(self) -> int:
        return int(sum(int(v.sum()) for v in self.generated.values()))


def derive_request_lengths(w: Workload, st: WorkloadState, completed: str, finish_time: float,
                           out_len: Optional[int] = None) -> List[str]:
    """Record ``completed`` as finished and release dependents whose inputs are all done.

    Returns the ids of requests that became ready.  Their input lengths follow
    ``derived_input_length``; with pre-resolved lengths this only checks them.
    """
    if completed not in w.local:
        raise ConfigError(f"unknown request {completed}")
    nid, i = w.local[completed]
    if out_len is not None and out_len != w.out_len[completed]:
        raise ConfigError(f"request {completed}: output length {out_len} differs from workload {w.out_len[completed]}")
    st.finish[nid][i] = finish_time
    st.generated[nid][i] = w.out_len[completed]
    released = []
    for d in w.dependents.get(completed, ()):
        dn, j = w.local[d]
        if not math.isnan(st.ready[dn][j]):
            continue
        times = []
        for pid, _ in w.specs[d].predecessors:
            if pid not in w.local:
                raise ConfigError(f"request {d}: dangling predecessor {pid}")
            pn, pi = w.local[pid]
            times.append(st.finish[pn][pi])
        if any(math.isnan(t) for t in times):
            continue
        st.ready[dn][j] = max(times)
        released.append(d)
        if w.out_len[d] == 0 and math.isnan(st.finish[dn][j]):
            released += derive_request_lengths(w, st, d, st.ready[dn][j])
    return released
