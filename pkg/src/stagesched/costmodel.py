"""Per-iteration FLOPs and latency model, coefficient fitting, loading times.

Latency of one engine iteration is the sum of three linear terms, one per
phase, each with coefficients that depend on the running-request count B:

    comp: a[B] * FLOPs + b[B]
    prep: a[B] * (B * s) + b[B]
    samp: a[B] * S + b[B]

B*s is the number of tokens processed (B for a decode step) and S the summed
context length (for a prefill batch, its prompt tokens).

Coefficients are profiled at a few B values.  Between profiled buckets they
are linearly interpolated in B, outside the profiled range they are clamped.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .catalog import ExecutionPlan, ModelSpec
from .errors import ConfigError, FitError

logger = logging.getLogger(__name__)

PHASES = ("comp", "prep", "samp")
PREFILL, DECODE = "prefill", "decode"


@dataclass(frozen=True)
class IterationDescriptor:
    kind: str
    B: int
    s: int
    S: int

    def __post_init__(self):
        if self.kind not in (PREFILL, DECODE):
            raise ValueError(f"unknown iteration kind {self.kind!r}")


def flops_prefill(model: ModelSpec, it: IterationDescriptor, tp: int):
    """L * (c*B*s + 2*B*h*s^2 / tp).

    Computed over a single division so that integer inputs give the correctly
    rounded value of the exact rational result.
    """
    if tp == 0:
        raise ValueError("tp must be >= 1")
    B, s = it.B, it.s
    return model.L * (model.c * B * s * tp + 2 * B * model.h * s * s) / tp


def flops_decode(model: ModelSpec, it: IterationDescriptor, tp: int):
    """L * (c*B + 2*h*S / tp)."""
    if tp == 0:
        raise ValueError("tp must be >= 1")
    return model.L * (model.c * it.B * tp + 2 * model.h * it.S) / tp


def flops(model: ModelSpec, it: IterationDescriptor, tp: int):
    if it.kind == PREFILL:
        return flops_prefill(model, it, tp)
    return flops_decode(model, it, tp)


def kernel_flops(kind: str, L: float, h: float, c: float, tp: float, B: int, s: int, S: int) -> float:
    # Same operation order as the simulation kernels, in doubles.
    # A prefill batch is described by its token total T and sum of squared
    # prompt lengths Q, which also covers batches of unequal prompts.
    L, h, c, tp = float(L), float(h), float(c), float(tp)
    if kind == PREFILL:
        T = float(B * s)
        Q = float(B * s * s)
        return L * (c * T * tp + 2.0 * h * Q) / tp
    return L * (c * float(B) * tp + 2.0 * h * float(S)) / tp


@dataclass
class PhaseCoefficients:
    phase: str
    entries: Dict[int, Tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"unknown phase {self.phase!r}")
        for B, (a, b) in self.entries.items():
            if not (math.isfinite(a) and math.isfinite(b)):
                raise ConfigError(f"non-finite coefficient for phase {self.phase} B={B}")
            if a < 0:
                raise ConfigError(f"negative slope for phase {self.phase} B={B}")

    def dense(self, size: int) -> Tuple[np.ndarray, np.ndarray]:
        """Coefficient arrays indexed by B in [0, size)."""
        if not self.entries:
            raise ConfigError(f"phase {self.phase} has no buckets")
        Bs = sorted(self.entries)
        a_pts = [self.entries[B][0] for B in Bs]
        b_pts = [self.entries[B][1] for B in Bs]
        grid = np.arange(size, dtype=np.float64)
        # np.interp clamps outside [Bs[0], Bs[-1]]
        return np.interp(grid, Bs, a_pts), np.interp(grid, Bs, b_pts)


def _loading_key(model_id: str, plan: ExecutionPlan) -> str:
    return f"{model_id}:{plan.key()}"


class CostTable:
    """Fitted coefficients per (model_id, tp) and model loading times per (model_id, plan)."""

    def __init__(self):
        self.coefficients: Dict[Tuple[str, int], Dict[str, PhaseCoefficients]] = {}
        self.loading: Dict[Tuple[str, ExecutionPlan], float] = {}
        self._dense: Dict[Tuple[str, int], np.ndarray] = {}

    def set_phase(self, model_id: str, tp: int, pc: PhaseCoefficients) -> None:
        self.coefficients.setdefault((model_id, int(tp)), {})[pc.phase] = pc
        self._dense.pop((model_id, int(tp)), None)

    def set_loading_time(self, model_id: str, plan: ExecutionPlan, seconds: float) -> None:
        if seconds < 0 or not math.isfinite(seconds):
            raise ConfigError(f"loading time for {model_id} {plan.key()} must be finite and >= 0")
        self.loading[(model_id, plan)] = float(seconds)

    def has(self, model_id: str, tp: int) -> bool:
        return (model_id, int(tp)) in self.coefficients

    def dense(self, model_id: str, tp: int) -> np.ndarray:
        """(6, n) array of a_comp, b_comp, a_prep, b_prep, a_samp, b_samp indexed by B.

        B beyond the last column uses the last column.
        """
        key = (model_id, int(tp))
        arr = self._dense.get(key)
        if arr is not None:
            return arr
        phases = self.coefficients.get(key)
        if phases is None:
            raise ConfigError(f"cost table has no coefficients for model {model_id!r} tp={tp}")
        missing = [p for p in PHASES if p not in phases]
        if missing:
            raise ConfigError(f"cost table for model {model_id!r} tp={tp} missing phase(s) {missing}")
        size = max(max(pc.entries) for pc in phases.values()) + 1
        rows = []
        for p in PHASES:
            a, b = phases[p].dense(size)
            rows += [a, b]
        arr = np.ascontiguousarray(np.vstack(rows))
        arr.setflags(write=False)
        self._dense[key] = arr
        return arr

    def loading_time(self, model_id: str, plan: ExecutionPlan) -> float:
        try:
            return self.loading[(model_id, plan)]
        except KeyError:
            raise ConfigError(f"cost table has no loading time for {_loading_key(model_id, plan)}") from None

    def check_coverage(self, catalog) -> None:
        """Raise unless every valid plan of every catalog model is covered."""
        for mid in catalog.models:
            for plan in catalog.plans(mid):
                self.dense(mid, plan.tp)
                self.loading_time(mid, plan)

    # -- serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        coefs: Dict[str, dict] = {}
        for (mid, tp), phases in self.coefficients.items():
            coefs.setdefault(mid, {})[str(tp)] = {
                p: {str(B): [a, b] for B, (a, b) in sorted(pc.entries.items())}
                for p, pc in phases.items()
            }
        return {
            "format_version": 1,
            "coefficients": coefs,
            "loading_time": {_loading_key(m, p): t for (m, p), t in self.loading.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CostTable":
        if d.get("format_version", 1) != 1:
            raise ConfigError(f"unsupported cost table format_version {d.get('format_version')}")
        table = cls()
        for mid, per_tp in d.get("coefficients", {}).items():
            for tp, phases in per_tp.items():
                for p, entries in phases.items():
                    table.set_phase(mid, int(tp), PhaseCoefficients(
                        p, {int(B): (float(ab[0]), float(ab[1])) for B, ab in entries.items()}))
        for key, t in d.get("loading_time", {}).items():
            mid, _, plan = key.rpartition(":")
            table.set_loading_time(mid, ExecutionPlan.parse(plan), float(t))
        return table


def iter_latency(table: CostTable, model: ModelSpec, tp: int, it: IterationDescriptor) -> float:
    """Latency in seconds of one iteration of ``model`` under tensor parallelism ``tp``."""
    if it.B <= 0:
        return 0.0
    coef = table.dense(model.id, tp)
    i = min(it.B, coef.shape[1] - 1)
    F = kernel_flops(it.kind, model.L, model.h, model.c, tp, it.B, it.s, it.S)
    if it.kind == PREFILL:
        T = float(it.B * it.s)
        return _eval(coef, i, F, T, T)
    return _eval(coef, i, F, float(it.B), float(it.S))


def _eval(coef, i, F, BS, S):
    # evaluation order mirrored in the kernels
    return (coef[0, i] * F + coef[1, i] + coef[2, i] * BS + coef[3, i]
            + coef[4, i] * S + coef[5, i])


def loading_time(table: CostTable, model_id: str, plan: ExecutionPlan) -> float:
    return table.loading_time(model_id, plan)


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProfileSample:
    model_id: str
    tp: int
    phase: str
    B: int
    x: float
    latency: float


def _fit_line(x: np.ndarray, y: np.ndarray) -> Tuple[float, float]:
    A = np.column_stack([x, np.ones_like(x)])
    (a, b), *_ = np.linalg.lstsq(A, y, rcond=None)
    return float(a), float(b)


def fit_coefficients(
    samples: Iterable,
    trim_fraction: float = 0.0,
) -> CostTable:
    """Least-squares line per (model_id, tp, phase, B) bucket.

    ``trim_fraction`` > 0 drops that fraction of largest-residual points after a
    first fit and refits, for profiles with sparse outliers.
    """
    buckets: Dict[Tuple[str, int, str, int], List[Tuple[float, float]]] = {}
    for smp in samples:
        if not isinstance(smp, ProfileSample):
            smp = ProfileSample(*smp)
        if smp.phase not in PHASES:
            raise FitError(f"unknown phase {smp.phase!r}")
        key = (smp.model_id, int(smp.tp), smp.phase, int(smp.B))
        buckets.setdefault(key, []).append((float(smp.x), float(smp.latency)))

    bad = [k for k, pts in buckets.items() if len({x for x, _ in pts}) < 2]
    if bad:
        names = ", ".join(f"(model={m}, tp={t}, phase={p}, B={B})" for m, t, p, B in sorted(bad))
        raise FitError(f"bucket(s) need at least 2 distinct x values: {names}")

    fitted: Dict[Tuple[str, int], Dict[str, Dict[int, Tuple[float, float]]]] = {}
    for (mid, tp, phase, B), pts in sorted(buckets.items()):
        arr = np.asarray(pts, dtype=np.float64)
        x, y = arr[:, 0], arr[:, 1]
        a, b = _fit_line(x, y)
        if trim_fraction > 0 and len(x) > 2:
            resid = np.abs(y - (a * x + b))
            n_drop = int(math.floor(trim_fraction * len(x)))
            if n_drop and len(x) - n_drop >= 2:
                keep = np.argsort(resid, kind="stable")[: len(x) - n_drop]
                if len(np.unique(x[keep])) >= 2:
                    x, y = x[keep], y[keep]
                    a, b = _fit_line(x, y)
        if a < 0:
            logger.warning("negative slope %.3g for (%s, tp=%d, %s, B=%d) clamped to 0", a, mid, tp, phase, B)
            a, b = 0.0, float(np.mean(y))
        fitted.setdefault((mid, tp), {}).setdefault(phase, {})[B] = (a, b)

    table = CostTable()
    for (mid, tp), phases in fitted.items():
        missing = [p for p in PHASES if p not in phases]
        if missing:
            raise FitError(f"(model={mid}, tp={tp}) has no samples for phase(s) {missing}")
        for p, entries in phases.items():
            table.set_phase(mid, tp, PhaseCoefficients(p, entries))
    return table


def read_profile_csv(path) -> List[ProfileSample]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"model_id", "tp", "phase", "B", "x", "latency_s"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise ConfigError(f"{path}: expected header {','.join(sorted(need))}")
        for lineno, row in enumerate(reader, start=2):
            try:
                out.append(ProfileSample(row["model_id"], int(row["tp"]), row["phase"],
                                         int(row["B"]), float(row["x"]), float(row["latency_s"])))
            except (TypeError, ValueError) as e:
                raise ConfigError(f"{path}:{lineno}: {e}") from None
    return out


def read_loading_csv(path, table: CostTable) -> None:
    """Rows of model_id,dp,tp,seconds."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            try:
                table.set_loading_time(row["model_id"], ExecutionPlan(int(row["dp"]), int(row["tp"])),
                                       float(row["seconds"]))
            except (KeyError, TypeError, ValueError) as e:
                raise ConfigError(f"{path}:{lineno}: {e}") from None
