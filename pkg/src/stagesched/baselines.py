"""Comparison heuristics: all GPUs to one model at a time, or an even split."""
from __future__ import annotations

import itertools
import logging
from typing import Dict, List, Sequence, Tuple

from .catalog import ExecutionPlan
from .graph import ready_models
from .planner import AppPlan, Entry, run_stages, stage_metrics
from .simulator import SimContext

logger = logging.getLogger(__name__)

DEFAULT_COMBINATION_CAP = 10_000


def max_choose(ctx, state, start, finished, started, counter) -> List[Entry]:
    order = {n: i for i, n in enumerate(ctx.graph.node_ids)}
    ready = sorted(ready_models(ctx.graph, finished, set()), key=order.get)
    for node in ready:
        best = None
        for plan in ctx.catalog.plans(ctx.graph.model_of[node]):
            counter.count += 1
            T = stage_metrics(ctx, state, [(node, plan)], start)[2]
            if best is None or T > best[0]:
                best = (T, plan)
        if best is not None:
            return [(node, best[1])]
    return []


def max_heuristic(ctx: SimContext) -> AppPlan:
    """One ready model per stage, on its highest-throughput plan."""
    return run_stages(ctx, max_choose, "max")


def even_split(total: int, mins: Sequence[int]) -> List[int]:
    """Split ``total`` GPUs as evenly as possible, honoring per-model minimums.

    Models whose minimum exceeds their even share get the minimum and the
    rest is re-split among the others.  Extra GPUs go to earlier models.
    """
    k = len(mins)
    shares = [0] * k
    free = list(range(k))
    remaining = total
    while free:
        base, extra = divmod(remaining, len(free))
        fair = {i: base + (1 if j < extra else 0) for j, i in enumerate(free)}
        over = [i for i in free if mins[i] > fair[i]]
        if not over:
            for i in free:
                shares[i] = fair[i]
            break
        for i in over:
            shares[i] = mins[i]
            remaining -= mins[i]
            free.remove(i)
    return shares


def distinct_permutations(items: Sequence[int]):
    """Distinct orderings of a multiset, lexicographically descending."""
    counts: Dict[int, int] = {}
    for x in items:
        counts[x] = counts.get(x, 0) + 1
    values = sorted(counts, reverse=True)
    out: List[int] = []

    def rec():
        if len(out) == len(items):
            yield tuple(out)
            return
        for v in values:
            if counts[v]:
                counts[v] -= 1
                out.append(v)
                yield from rec()
                out.pop()
                counts[v] += 1

    yield from rec()


def plans_for_share(plans: Sequence[ExecutionPlan], g: int) -> List[ExecutionPlan]:
    """Plans using exactly g GPUs, else those with the largest count below g."""
    exact = [p for p in plans if p.gpus_required == g]
    if exact:
        return exact
    below = [p for p in plans if p.gpus_required < g]
    if not below:
        return []
    top = max(p.gpus_required for p in below)
    return [p for p in below if p.gpus_required == top]


def min_choose(allow_preemption: bool = True, cap: int = DEFAULT_COMBINATION_CAP):
    def choose(ctx, state, start, finished, started, counter) -> List[Entry]:
        N = ctx.catalog.topo.num_gpus
        order = {n: i for i, n in enumerate(ctx.graph.node_ids)}
        fixed: List[Entry] = []
        if not allow_preemption:
            fixed = [(n, p) for n, p in started.items() if n not in finished]
        fixed_nodes = {n for n, _ in fixed}
        budget = N - sum(p.gpus_required for _, p in fixed)
        ready = sorted(ready_models(ctx.graph, finished, set()) - fixed_nodes, key=order.get)
        chosen: List[str] = []
        need = 0
        for node in ready:
            plans = ctx.catalog.plans(ctx.graph.model_of[node])
            if not plans:
                continue
            m = min(p.gpus_required for p in plans)
            if need + m <= budget:
                chosen.append(node)
                need += m
        if not chosen:
            return fixed
        mins = [min(p.gpus_required for p in ctx.catalog.plans(ctx.graph.model_of[n])) for n in chosen]
        shares = even_split(budget, mins)
        # every distinct arrangement of the share multiset over the chosen models
        arrangements = list(distinct_permutations(shares))
        cache: dict = {}
        best = None
        evaluated = 0
        for arr in arrangements:
            if any(a < m for a, m in zip(arr, mins)):
                continue
            options = [plans_for_share(ctx.catalog.plans(ctx.graph.model_of[n]), g) for n, g in zip(chosen, arr)]
            if any(not o for o in options):
                continue
            for combo in itertools.product(*options):
                if evaluated >= cap:
                    break
                entries = fixed + list(zip(chosen, combo))
                if sum(p.gpus_required for _, p in entries) > N:
                    continue
                evaluated += 1
                counter.count += 1
                T = stage_metrics(ctx, state, entries, start, cache)[2]
                if best is None or T > best[0]:
                    best = (T, entries)
        if evaluated >= cap:
            logger.warning("min heuristic: combination cap %d reached", cap)
        return best[1] if best else fixed

    return choose


def min_heuristic(ctx: SimContext, allow_preemption: bool = True, cap: int = DEFAULT_COMBINATION_CAP) -> AppPlan:
    """Ready models share the GPUs as evenly as possible; best split by simulated throughput."""
    return run_stages(ctx, min_choose(allow_preemption, cap), "min", allow_preemption)
