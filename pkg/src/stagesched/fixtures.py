"""Synthetic application fixtures used by tests, benchmarks and ``stagesched fixture``.

Every fixture is fully deterministic.  Cost tables are synthetic stand-ins for
profiled coefficients.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .catalog import Catalog, ExecutionPlan, GpuTopology, ModelSpec
from .costmodel import PHASES, CostTable, PhaseCoefficients
from .formats import build_workload, gpus_to_dict, lengths_to_dict, models_to_dict, write_json
from .graph import ADD_OUTPUT_LEN, CONCAT, FILTER_FINAL, AppGraph, Edge, RequestSpec, requests_to_dict
from .sampler import OutputLengthEcdf, build_ecdf, ecdfs_to_dict
from .simulator import EngineConfig, SimContext

GiB = 1 << 30


@dataclass
class Fixture:
    name: str
    models: List[ModelSpec]
    topo: GpuTopology
    table: CostTable
    graph: AppGraph
    requests: List[RequestSpec]
    ecdfs: Dict[str, OutputLengthEcdf]
    cfg: EngineConfig = field(default_factory=EngineConfig)

    def catalog(self) -> Catalog:
        return Catalog(self.models, self.topo)

    def context(self, seed: int = 0, lengths: Optional[Mapping[str, int]] = None,
                backend: Optional[str] = None) -> SimContext:
        cat = self.catalog()
        w = build_workload(cat, self.graph, self.requests, self.ecdfs, seed, lengths)
        return SimContext(cat, self.table, self.cfg, w, backend)

    def sampled_lengths(self, seed: int = 0) -> Dict[str, int]:
        return dict(self.context(seed).workload.out_len)

    def write(self, out_dir, seed: Optional[int] = None) -> Dict[str, Path]:
        """Write the CLI input files; with ``seed`` also a known-lengths file."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {k: out / f"{k}.json" for k in ("models", "gpus", "cost_table", "ecdf", "app", "requests")}
        write_json(paths["models"], models_to_dict(self.models))
        write_json(paths["gpus"], gpus_to_dict(self.topo, self.cfg))
        write_json(paths["cost_table"], self.table.to_dict())
        write_json(paths["ecdf"], ecdfs_to_dict(self.ecdfs))
        write_json(paths["app"], self.graph.to_dict())
        write_json(paths["requests"], requests_to_dict(self.requests))
        if seed is not None:
            paths["lengths"] = out / "lengths.json"
            write_json(paths["lengths"], lengths_to_dict(self.sampled_lengths(seed)))
        return paths


# ---------------------------------------------------------------------------
# cost-table builders
# ---------------------------------------------------------------------------

def set_affine_batch_latency(table: CostTable, model_id: str, tp: int, alpha: float, beta: float,
                             b_max: int = 256) -> None:
    """Iteration latency alpha + beta*B for every iteration kind, independent of lengths."""
    table.set_phase(model_id, tp, PhaseCoefficients("comp", {1: (0.0, alpha + beta), b_max: (0.0, alpha + beta * b_max)}))
    table.set_phase(model_id, tp, PhaseCoefficients("prep", {1: (0.0, 0.0)}))
    table.set_phase(model_id, tp, PhaseCoefficients("samp", {1: (0.0, 0.0)}))


def set_realistic_latency(table: CostTable, model: ModelSpec, tp: int, peak_flops: float = 150e12) -> None:
    """Roofline-flavoured coefficients: compute slope, per-token prep and per-context sampling."""
    eff = 0.9 ** (int(np.log2(tp)))
    buckets = (1, 8, 32, 128, 256)
    comp, prep, samp = {}, {}, {}
    for B in buckets:
        # small batches are launch/memory bound: larger fixed cost share
        comp[B] = (1.0 / (peak_flops * tp * eff), 0.006 + 0.0015 * (tp - 1) + 0.00002 * B)
        prep[B] = (1.5e-7, 0.0008)
        samp[B] = (4e-9 * model.L / 40, 0.0004)
    table.set_phase(model.id, tp, PhaseCoefficients("comp", comp))
    table.set_phase(model.id, tp, PhaseCoefficients("prep", prep))
    table.set_phase(model.id, tp, PhaseCoefficients("samp", samp))


def realistic_loading(table: CostTable, model: ModelSpec, plan: ExecutionPlan) -> None:
    # weights stream at ~2.5 GB/s per GPU, replicas load in parallel
    table.set_loading_time(model.id, plan, round(3.0 + model.weight_bytes / plan.tp / 2.5e9 + 0.4 * (plan.dp - 1), 3))


def _llm(mid: str, billions: float, layers: int, hidden: int, tps=(1, 2, 4, 8), l_max: int = 4096) -> ModelSpec:
    weight = int(billions * 2e9)
    return ModelSpec(mid, layers, hidden, 2.0 * billions * 1e9 / layers, l_max, weight,
                     2 * 2 * hidden, tuple(t for t in tps if hidden % t == 0))


def _full_table(models: Sequence[ModelSpec], topo: GpuTopology) -> CostTable:
    table = CostTable()
    cat = Catalog(models, topo)
    for m in models:
        for tp in m.allowed_tp:
            set_realistic_latency(table, m, tp)
        for plan in cat.plans(m.id):
            realistic_loading(table, m, plan)
    return table


def _lognormal_ecdf(mid: str, median: float, sigma: float, seed: int, n: int = 2000, cap: int = 2048) -> OutputLengthEcdf:
    rng = np.random.default_rng(seed)
    vals = np.clip(np.round(rng.lognormal(np.log(median), sigma, n)), 1, cap).astype(int)
    return build_ecdf(vals.tolist(), mid)


# ---------------------------------------------------------------------------
# fixtures
# ---------------------------------------------------------------------------

def _simple_models(ids: Sequence[str], tps=(1,)) -> List[ModelSpec]:
    return [ModelSpec(m, 4, 64, 4096.0, 512, 1 << 20, 16, tps) for m in ids]


SIX_MODELS_SUBLINEAR = {"m2": (0.1, 0.05), "m3": (0.1, 0.05), "m4": (0.1, 0.05), "m5": (0.2, 0.05),
                  "m6": (0.1, 0.05)}


def six_models_fixture(n_requests: int = 12, out_len: int = 10, sublinear=None) -> Fixture:
    """Six independent models on 4 GPUs, no loading cost.

    Iteration latency is alpha + beta*B per replica.  m1 scales linearly and
    takes 8/g seconds on g GPUs.  m2..m6 take out_len*(alpha + w/g) seconds,
    with (alpha, w) from ``sublinear``; m5 is the longest.
    """
    ids = [f"m{i}" for i in range(1, 7)]
    models = _simple_models(ids)
    topo = GpuTopology(4, 16 * GiB)
    table = CostTable()
    params = {"m1": (0.0, 8.0 / out_len / n_requests)}
    for m, (alpha, w) in (sublinear or SIX_MODELS_SUBLINEAR).items():
        params[m] = (alpha, w / n_requests)
    cat = Catalog(models, topo)
    for m in ids:
        set_affine_batch_latency(table, m, 1, *params[m])
        for plan in cat.plans(m):
            table.set_loading_time(m, plan, 0.0)
    graph = AppGraph([(m, m) for m in ids])
    requests = [RequestSpec(f"{m}-r{j}", m, 1) for m in ids for j in range(n_requests)]
    ecdfs = {m: build_ecdf([out_len], m) for m in ids}
    return Fixture("six_models", models, topo, table, graph, requests, ecdfs, EngineConfig(max_num_seqs=256))


CHATGLM_ALPHA = 0.0475
CHATGLM_GAMMA = 1.8e-4


def chatglm_fixture(with_competitor: bool = True) -> Fixture:
    """A data-parallel-only model whose 8-GPU plan is only 1.5x faster than 1 GPU.

    1000 requests (20 prompt tokens, 100 output tokens).  Iteration latency is
    alpha + gamma*B; loading takes 11 s on one GPU and 25 s on eight, so the
    model finishes in 48 s on 1 GPU and 32 s on 8.  With ``with_competitor`` a
    linearly scaling model is ready at the same time.
    """
    glm = ModelSpec("chatglm3-6b", 28, 4096, 2.0 * 6.2e9 / 28, 8192, int(12.4e9), 2 * 2 * 256, (1,))
    models = [glm]
    topo = GpuTopology.pairs(8, 80 * GiB)
    table = CostTable()
    set_affine_batch_latency(table, glm.id, 1, CHATGLM_ALPHA, CHATGLM_GAMMA)
    cat = Catalog(models, topo)
    for plan in Catalog([glm], topo).plans(glm.id):
        table.set_loading_time(glm.id, plan, 11.0 + 2.0 * (plan.dp - 1))
    nodes = [("glm", glm.id)]
    requests = [RequestSpec(f"glm-{j}", "glm", 20) for j in range(1000)]
    ecdfs = {glm.id: build_ecdf([100], glm.id)}
    if with_competitor:
        lin = ModelSpec("linear-7b", 32, 4096, 2.0 * 7e9 / 32, 8192, int(14e9), 2 * 2 * 4096, (1,))
        models.append(lin)
        # latency proportional to the batch: halves whenever the GPU count doubles
        set_affine_batch_latency(table, lin.id, 1, 0.0, 0.002)
        for plan in Catalog([lin], topo).plans(lin.id):
            table.set_loading_time(lin.id, plan, 1.0)
        nodes.append(("lin", lin.id))
        requests += [RequestSpec(f"lin-{j}", "lin", 20) for j in range(256)]
        ecdfs[lin.id] = build_ecdf([100], lin.id)
    graph = AppGraph(nodes)
    return Fixture("chatglm" if not with_competitor else "chatglm_vs_linear", models, topo, table, graph,
                   requests, ecdfs, EngineConfig(max_num_seqs=256))


def _chain_documents(node: str, n_docs: int, seed: int, chunk_len: int = 512, max_chunks: int = 6,
                     cap: int = 256):
    """Chunk chains: each document is a list of requests linked to the previous chunk."""
    rng = np.random.default_rng(seed)
    reqs: List[RequestSpec] = []
    finals: List[str] = []
    for d in range(n_docs):
        chunks = int(rng.integers(1, max_chunks + 1))
        prev = None
        for c in range(chunks):
            rid = f"{node}-d{d}-c{c}"
            preds = ((prev, ADD_OUTPUT_LEN),) if prev else ()
            reqs.append(RequestSpec(rid, node, chunk_len, preds, cap=cap))
            prev = rid
        finals.append(prev)
    return reqs, finals


def chain_summary_fixture(n_docs: int = 40, seed: int = 7, num_gpus: int = 4, evaluations: int = 1,
                          summary_cap: int = 256) -> Fixture:
    """Summarizer with a self-loop over document chunks, then an evaluator on final summaries."""
    models = [_llm("summ-13b", 13, 40, 5120), _llm("eval-7b", 7, 32, 4096)]
    topo = GpuTopology.pairs(num_gpus, 80 * GiB)
    table = _full_table(models, topo)
    graph = AppGraph([("summarizer", "summ-13b"), ("evaluator", "eval-7b")],
                     [Edge("summarizer", "summarizer", CONCAT, 40), Edge("summarizer", "evaluator", FILTER_FINAL, 60)])
    reqs, finals = _chain_documents("summarizer", n_docs, seed, cap=summary_cap)
    reqs += [RequestSpec(f"evaluator-{k}-{e}", "evaluator", 100, ((f, ADD_OUTPUT_LEN),), cap=64)
             for k, f in enumerate(finals) for e in range(evaluations)]
    ecdfs = {"summ-13b": _lognormal_ecdf("summ-13b", 180, 0.5, seed),
             "eval-7b": _lognormal_ecdf("eval-7b", 30, 0.6, seed + 1)}
    return Fixture("chain_summary", models, topo, table, graph, reqs, ecdfs)


ENSEMBLE_SPECS = [("vicuna-13b", 13, 40, 5120), ("llama-7b", 7, 32, 4096), ("mistral-7b", 7, 32, 4096),
                  ("baichuan-13b", 13, 40, 5120), ("chatglm-6b", 6, 28, 4096), ("koala-13b", 13, 40, 5120),
                  ("alpaca-7b", 7, 32, 4096), ("dolly-12b", 12, 36, 5120), ("stablelm-7b", 7, 16, 6144)]


def ensembling_fixture(n_requests: int = 120, seed: int = 11) -> Fixture:
    """Six independent models answering the same prompts."""
    models = [_llm(mid, b, L, h) for mid, b, L, h in ENSEMBLE_SPECS[:6]]
    topo = GpuTopology.pairs(8, 80 * GiB)
    table = _full_table(models, topo)
    rng = np.random.default_rng(seed)
    prompts = rng.integers(32, 400, n_requests)
    graph = AppGraph([(f"ens{k}", m.id) for k, m in enumerate(models)])
    reqs = [RequestSpec(f"ens{k}-{j}", f"ens{k}", int(prompts[j])) for k in range(len(models))
            for j in range(n_requests)]
    ecdfs = {m.id: _lognormal_ecdf(m.id, 120 + 40 * k, 0.7, seed + k) for k, m in enumerate(models)}
    return Fixture("ensembling", models, topo, table, graph, reqs, ecdfs)


ROUTER_COUNTS = (408, 1267, 2068, 456, 2657)


def router_fixture(scale: float = 1.0, seed: int = 13) -> Fixture:
    """Requests routed to one of five models with skewed selection frequency."""
    specs = [("r-llama-13b", 13, 40, 5120), ("r-vicuna-7b", 7, 32, 4096), ("r-mistral-7b", 7, 32, 4096),
             ("r-koala-13b", 13, 40, 5120), ("r-chatglm-6b", 6, 28, 4096)]
    models = [_llm(mid, b, L, h) for mid, b, L, h in specs]
    topo = GpuTopology.pairs(8, 80 * GiB)
    table = _full_table(models, topo)
    rng = np.random.default_rng(seed)
    graph = AppGraph([(f"route{k}", m.id) for k, m in enumerate(models)])
    reqs = []
    for k, count in enumerate(ROUTER_COUNTS):
        n = max(1, int(round(count * scale)))
        lens = rng.integers(16, 300, n)
        reqs += [RequestSpec(f"route{k}-{j}", f"route{k}", int(lens[j])) for j in range(n)]
    ecdfs = {m.id: _lognormal_ecdf(m.id, 150, 0.8, seed + k) for k, m in enumerate(models)}
    return Fixture("router", models, topo, table, graph, reqs, ecdfs)


def mixed_fixture(n_docs: int = 500, n_ens: int = 5000, seed: int = 17, num_gpus: int = 8,
                  ens_models: int = 9, ens_cap: int = 512) -> Fixture:
    """Chain summary (four evaluations per summary) next to a many-model ensemble."""
    cs = chain_summary_fixture(n_docs, seed, num_gpus, evaluations=4, summary_cap=900)
    ens = [_llm(mid, b, L, h) for mid, b, L, h in ENSEMBLE_SPECS[:ens_models]]
    models = cs.models + ens
    topo = cs.topo
    table = _full_table(models, topo)
    nodes = list(cs.graph.nodes) + [(f"ens{k}", m.id) for k, m in enumerate(ens)]
    graph = AppGraph(nodes, list(cs.graph.edges))
    rng = np.random.default_rng(seed)
    prompts = rng.integers(32, 400, n_ens)
    reqs = list(cs.requests) + [RequestSpec(f"ens{k}-{j}", f"ens{k}", int(prompts[j]), cap=ens_cap)
                                for k in range(len(ens)) for j in range(n_ens)]
    ecdfs = dict(cs.ecdfs)
    for k, m in enumerate(ens):
        ecdfs[m.id] = _lognormal_ecdf(m.id, 120 + 25 * k, 0.7, seed + 10 + k)
    return Fixture("mixed", models, topo, table, graph, reqs, ecdfs)


FIXTURES = {
    "six_models": six_models_fixture,
    "chatglm": lambda: chatglm_fixture(with_competitor=False),
    "chatglm_vs_linear": chatglm_fixture,
    "chain_summary": chain_summary_fixture,
    "ensembling": ensembling_fixture,
    "router": router_fixture,
    "mixed": mixed_fixture,
}


def get_fixture(name: str) -> Fixture:
    try:
        return FIXTURES[name]()
    except KeyError:
        raise KeyError(f"unknown fixture {name!r}; choose from {sorted(FIXTURES)}") from None
