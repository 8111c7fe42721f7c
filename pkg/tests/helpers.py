"""Small builders shared by the tests."""
from __future__ import annotations

from stagesched.catalog import ModelSpec
from stagesched.costmodel import CostTable, PhaseCoefficients


def tiny_model(mid="toy", l_max=64, tps=(1,)):
    return ModelSpec(mid, 1, 8, 1.0, l_max, 1 << 20, 0, tps)


def unit_table(mid="toy", tps=(1,), base=1.0, per=0.5):
    """Latency base + per*T for prefill (T prompt tokens) and base + per*B for decode."""
    t = CostTable()
    for tp in tps:
        t.set_phase(mid, tp, PhaseCoefficients("comp", {1: (0.0, base)}))
        t.set_phase(mid, tp, PhaseCoefficients("prep", {1: (per, 0.0)}))
        t.set_phase(mid, tp, PhaseCoefficients("samp", {1: (0.0, 0.0)}))
    return t


def trace_tuples(tr):
    kinds = ("P", "D")
    return [(int(tr.replica[k]), kinds[int(tr.kind[k])], int(tr.B[k]), float(tr.start[k]), float(tr.latency[k]))
            for k in range(len(tr))]
