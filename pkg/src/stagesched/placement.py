"""Mapping stage entries onto concrete GPUs under NVLink connectivity rules.

A tensor-parallel group of size tp >= 2 must sit inside one NVLink group when
it fits in one, otherwise it must be a union of whole NVLink groups.  Moving
or newly loading a replica costs the model's loading time; replicas that keep
their previous GPUs with an unchanged plan are free.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

from .catalog import ExecutionPlan, GpuTopology
from .errors import InfeasibleError

Gpus = Tuple[int, ...]

EXACT_MAX_GPUS = 8


@dataclass(frozen=True)
class PlacementState:
    num_gpus: int
    # node -> (plan, GPU tuple per replica)
    replicas: Mapping[str, Tuple[ExecutionPlan, Tuple[Gpus, ...]]] = field(default_factory=dict)

    @classmethod
    def empty(cls, num_gpus: int) -> "PlacementState":
        return cls(num_gpus, {})

    def owner(self) -> List[Optional[Tuple[str, int, int]]]:
        """Per GPU: (node, replica index, tp rank) or None."""
        out: List[Optional[Tuple[str, int, int]]] = [None] * self.num_gpus
        for node, (_, reps) in self.replicas.items():
            for r, gpus in enumerate(reps):
                for rank, g in enumerate(gpus):
                    if out[g] is not None:
                        raise InfeasibleError(f"GPU {g} double-booked by {out[g][0]} and {node}")
                    out[g] = (node, r, rank)
        return out

    def gpus_of(self, node: str) -> Tuple[int, ...]:
        if node not in self.replicas:
            return ()
        return tuple(sorted(g for reps in self.replicas[node][1] for g in reps))

    def to_dict(self) -> dict:
        return {
            "num_gpus": self.num_gpus,
            "replicas": {n: {"plan": p.key(), "gpus": [list(g) for g in reps]}
                         for n, (p, reps) in sorted(self.replicas.items())},
        }


@dataclass(frozen=True)
class Move:
    node: str
    replica: int
    src: Optional[Gpus]
    dst: Gpus
    cost: float


def tp_group_ok(gpus: Sequence[int], topo: GpuTopology) -> bool:
    """Connectivity predicate for one tensor-parallel group."""
    gs = set(gpus)
    if len(gs) != len(gpus) or not all(0 <= g < topo.num_gpus for g in gs):
        return False
    if len(gs) == 1:
        return True
    groups = [set(g) for g in topo.nvlink_groups]
    if len(gs) <= max(len(g) for g in groups):
        return any(gs <= g for g in groups)
    return all(g <= gs for g in groups if g & gs)


def placement_is_feasible(state: PlacementState, topo: GpuTopology) -> bool:
    try:
        state.owner()
    except InfeasibleError:
        return False
    for plan, reps in state.replicas.values():
        if len(reps) != plan.dp:
            return False
        for gpus in reps:
            if len(gpus) != plan.tp or not tp_group_ok(gpus, topo):
                return False
    return True


@lru_cache(maxsize=256)
def candidate_sets(topo: GpuTopology, tp: int) -> Tuple[Gpus, ...]:
    """All GPU sets a tp-group may occupy, in lexicographic order."""
    if tp == 1:
        return tuple((g,) for g in range(topo.num_gpus))
    groups = topo.nvlink_groups
    out = set()
    if tp <= max(len(g) for g in groups):
        for grp in groups:
            if tp <= len(grp):
                out.update(itertools.combinations(grp, tp))
    else:
        for k in range(1, len(groups) + 1):
            for combo in itertools.combinations(groups, k):
                flat = tuple(sorted(g for grp in combo for g in grp))
                if len(flat) == tp:
                    out.add(flat)
    return tuple(sorted(out))


def _fit_rest(items: List[Tuple[int, int]], free: int, topo: GpuTopology) -> Optional[List[Gpus]]:
    """Backtracking: items are (slot, tp); place each on a candidate set within ``free`` (bitmask)."""
    order = sorted(range(len(items)), key=lambda k: (-items[k][1], k))
    chosen: List[Optional[Gpus]] = [None] * len(items)

    def rec(pos: int, mask: int) -> bool:
        if pos == len(order):
            return True
        k = order[pos]
        for cand in candidate_sets(topo, items[k][1]):
            bits = 0
            for g in cand:
                bits |= 1 << g
            if bits & mask == bits:
                chosen[k] = cand
                if rec(pos + 1, mask & ~bits):
                    return True
        return False

    if rec(0, free):
        return chosen  # type: ignore[return-value]
    return None


def place_stage(
    prev: PlacementState,
    stage,
    topo: GpuTopology,
    table,
    model_of: Optional[Callable[[str], str]] = None,
) -> Tuple[PlacementState, float, List[Move]]:
    """Place ``stage`` entries given the previous placement, minimizing reload cost.

    ``stage`` is a Stage or a sequence of (node, plan).  ``model_of`` maps a
    node id to its model id for loading-time lookup (identity by default).
    """
    entries = list(getattr(stage, "entries", stage))
    model_of = model_of or (lambda n: n)
    need = sum(p.gpus_required for _, p in entries)
    if need > topo.num_gpus:
        raise InfeasibleError(f"stage needs {need} GPUs but only {topo.num_gpus} exist")

    # slots: one per replica of every entry
    slots: List[Tuple[str, ExecutionPlan, int]] = []
    for node, plan in entries:
        for r in range(plan.dp):
            slots.append((node, plan, r))
    cost_of = [table.loading_time(model_of(n), p) for n, p, _ in slots]

    keepable: List[Tuple[int, Gpus]] = []  # (slot index, previous GPUs)
    for s, (node, plan, r) in enumerate(slots):
        old = prev.replicas.get(node)
        if old is not None and old[0] == plan:
            keepable.append((s, old[1][r]))

    def attempt(kept: Sequence[int]) -> Optional[List[Gpus]]:
        mask = (1 << topo.num_gpus) - 1
        result: List[Optional[Gpus]] = [None] * len(slots)
        for k in kept:
            s, gpus = keepable[k]
            bits = sum(1 << g for g in gpus)
            if bits & mask != bits:
                return None
            mask &= ~bits
            result[s] = gpus
        keep_slots = {keepable[k][0] for k in kept}
        rest = [(s, slots[s][1].tp) for s in range(len(slots)) if s not in keep_slots]
        fitted = _fit_rest(rest, mask, topo)
        if fitted is None:
            return None
        for (s, _), gpus in zip(rest, fitted):
            result[s] = gpus
        return result  # type: ignore[return-value]

    result = None
    K = len(keepable)
    if topo.num_gpus <= EXACT_MAX_GPUS:
        subsets = []
        for bits in range(1 << K):
            kept = tuple(k for k in range(K) if bits >> k & 1)
            value = sum(cost_of[keepable[k][0]] for k in kept)
            subsets.append((-value, -len(kept), kept))
        subsets.sort()
        for _, _, kept in subsets:
            result = attempt(kept)
            if result is not None:
                break
    else:
        kept = list(range(K))
        while True:
            result = attempt(kept)
            if result is not None or not kept:
                break
            # give up the cheapest kept replica and retry
            kept.remove(min(kept, key=lambda k: (cost_of[keepable[k][0]], -k)))
    if result is None:
        blocking = ", ".join(f"{n}{p}" for n, p in entries)
        raise InfeasibleError(f"no NVLink-feasible placement for entries: {blocking}")

    reps: Dict[str, List[Gpus]] = {}
    moves: List[Move] = []
    total = 0.0
    for s, (node, plan, r) in enumerate(slots):
        gpus = result[s]
        reps.setdefault(node, []).append(gpus)
        old = prev.replicas.get(node)
        src = old[1][r] if old is not None and r < len(old[1]) else None
        if old is not None and old[0] == plan and src == gpus:
            continue
        moves.append(Move(node, r, src, gpus, cost_of[s]))
        total += cost_of[s]
    plan_of = dict(entries)
    state = PlacementState(topo.num_gpus, {n: (plan_of[n], tuple(g)) for n, g in reps.items()})
    return state, total, moves
