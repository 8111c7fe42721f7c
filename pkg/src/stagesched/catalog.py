"""Models, GPU topology and (dp, tp) execution plans."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

from .errors import ConfigError

# fraction of each GPU's memory held back for activations / workspace
DEFAULT_RESERVE_FRACTION = 0.10


@dataclass(frozen=True)
class ModelSpec:
    id: str
    num_layers: int
    hidden_dim: int
    matmul_weight_sum: float
    max_seq_len: int
    weight_bytes: int
    kv_bytes_per_token_per_layer: int
    allowed_tp: Tuple[int, ...] = (1,)

    def __post_init__(self):
        object.__setattr__(self, "allowed_tp", tuple(sorted(set(int(t) for t in self.allowed_tp))))
        if self.num_layers < 1 or self.hidden_dim < 1:
            raise ConfigError(f"model {self.id}: num_layers and hidden_dim must be >= 1")
        if not self.matmul_weight_sum > 0:
            raise ConfigError(f"model {self.id}: matmul_weight_sum must be > 0")
        if self.max_seq_len < 1:
            raise ConfigError(f"model {self.id}: max_seq_len must be >= 1")
        if self.weight_bytes <= 0:
            raise ConfigError(f"model {self.id}: weight_bytes must be > 0")
        if self.kv_bytes_per_token_per_layer < 0:
            raise ConfigError(f"model {self.id}: kv_bytes_per_token_per_layer must be >= 0")
        if not self.allowed_tp:
            raise ConfigError(f"model {self.id}: allowed_tp is empty")
        for tp in self.allowed_tp:
            if tp < 1 or self.hidden_dim % tp:
                raise ConfigError(f"model {self.id}: tp={tp} does not divide hidden_dim={self.hidden_dim}")

    # short aliases used throughout the cost formulas
    @property
    def L(self) -> int:
        return self.num_layers

    @property
    def h(self) -> int:
        return self.hidden_dim

    @property
    def c(self) -> float:
        return self.matmul_weight_sum

    @property
    def l_max(self) -> int:
        return self.max_seq_len

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "num_layers": self.num_layers,
            "hidden_dim": self.hidden_dim,
            "matmul_weight_sum": self.matmul_weight_sum,
            "max_seq_len": self.max_seq_len,
            "weight_bytes": self.weight_bytes,
            "kv_bytes_per_token_per_layer": self.kv_bytes_per_token_per_layer,
            "allowed_tp": list(self.allowed_tp),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        try:
            return cls(
                id=str(d["id"]),
                num_layers=int(d["num_layers"]),
                hidden_dim=int(d["hidden_dim"]),
                matmul_weight_sum=d["matmul_weight_sum"],
                max_seq_len=int(d["max_seq_len"]),
                weight_bytes=int(d["weight_bytes"]),
                kv_bytes_per_token_per_layer=int(d["kv_bytes_per_token_per_layer"]),
                allowed_tp=tuple(d.get("allowed_tp", (1,))),
            )
        except KeyError as e:
            raise ConfigError(f"model entry missing field {e}") from None


@dataclass(frozen=True)
class GpuTopology:
    num_gpus: int
    mem_bytes_per_gpu: int
    nvlink_groups: Tuple[Tuple[int, ...], ...] = field(default=())

    def __post_init__(self):
        groups = self.nvlink_groups
        if not groups:
            groups = tuple((g,) for g in range(self.num_gpus))
        groups = tuple(tuple(sorted(int(g) for g in grp)) for grp in groups)
        object.__setattr__(self, "nvlink_groups", groups)
        flat = [g for grp in groups for g in grp]
        if sorted(flat) != list(range(self.num_gpus)) or any(not grp for grp in groups):
            raise ConfigError(
                f"nvlink_groups must partition GPUs 0..{self.num_gpus - 1}, got {list(map(list, groups))}"
            )

    @classmethod
    def pairs(cls, num_gpus: int, mem_bytes_per_gpu: int) -> "GpuTopology":
        """Topology where consecutive GPU pairs share an NVLink bridge."""
        groups = [tuple(range(i, min(i + 2, num_gpus))) for i in range(0, num_gpus, 2)]
        return cls(num_gpus, mem_bytes_per_gpu, tuple(groups))

    def group_of(self, gpu: int) -> Tuple[int, ...]:
        for grp in self.nvlink_groups:
            if gpu in grp:
                return grp
        raise KeyError(gpu)

    def to_dict(self) -> dict:
        return {
            "num_gpus": self.num_gpus,
            "mem_bytes_per_gpu": self.mem_bytes_per_gpu,
            "nvlink_groups": [list(g) for g in self.nvlink_groups],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GpuTopology":
        try:
            return cls(
                num_gpus=int(d["num_gpus"]),
                mem_bytes_per_gpu=int(d["mem_bytes_per_gpu"]),
                nvlink_groups=tuple(tuple(g) for g in d.get("nvlink_groups", ())),
            )
        except KeyError as e:
            raise ConfigError(f"gpu topology missing field {e}") from None


@dataclass(frozen=True, order=True)
class ExecutionPlan:
    dp: int
    tp: int

    def __post_init__(self):
        if self.dp < 1 or self.tp < 1:
            raise ConfigError(f"invalid plan dp={self.dp} tp={self.tp}")

    @property
    def gpus_required(self) -> int:
        return self.dp * self.tp

    def key(self) -> str:
        return f"dp{self.dp}tp{self.tp}"

    @classmethod
    def parse(cls, key: str) -> "ExecutionPlan":
        # "dp2tp4"
        if not key.startswith("dp") or "tp" not in key:
            raise ConfigError(f"bad plan key {key!r}")
        dp, tp = key[2:].split("tp")
        return cls(int(dp), int(tp))

    def __str__(self):
        return f"({self.dp},{self.tp})"


def usable_memory(topo: GpuTopology, reserve_fraction: float = DEFAULT_RESERVE_FRACTION) -> float:
    return topo.mem_bytes_per_gpu * (1.0 - reserve_fraction)


def plan_is_valid(
    model: ModelSpec,
    plan: ExecutionPlan,
    topo: GpuTopology,
    reserve_fraction: float = DEFAULT_RESERVE_FRACTION,
) -> bool:
    """True if the plan fits: tp allowed, enough GPUs, and weights plus one
    full-length sequence of KV cache fit in each GPU's usable memory."""
    if plan.tp not in model.allowed_tp:
        return False
    if plan.gpus_required > topo.num_gpus:
        return False
    per_gpu = (model.weight_bytes + model.l_max * model.L * model.kv_bytes_per_token_per_layer) / plan.tp
    return per_gpu <= usable_memory(topo, reserve_fraction)


def enumerate_valid_plans(
    model: ModelSpec,
    topo: GpuTopology,
    reserve_fraction: float = DEFAULT_RESERVE_FRACTION,
) -> List[ExecutionPlan]:
    plans = []
    for tp in model.allowed_tp:
        for dp in range(1, topo.num_gpus // tp + 1):
            p = ExecutionPlan(dp, tp)
            if plan_is_valid(model, p, topo, reserve_fraction):
                plans.append(p)
    plans.sort(key=lambda p: (p.gpus_required, p.tp))
    return plans


def kv_capacity_tokens(
    model: ModelSpec,
    plan: ExecutionPlan,
    topo: GpuTopology,
    reserve_fraction: float = DEFAULT_RESERVE_FRACTION,
) -> int:
    """KV-cache token capacity of one replica (tp GPUs) after loading weights."""
    per_token = model.L * model.kv_bytes_per_token_per_layer / plan.tp
    free = usable_memory(topo, reserve_fraction) - model.weight_bytes / plan.tp
    if per_token <= 0:
        return 1 << 40
    return int(free // per_token)


class Catalog:
    """Model lookup by id plus the topology they run on."""

    def __init__(self, models: Iterable[ModelSpec], topo: GpuTopology,
                 reserve_fraction: float = DEFAULT_RESERVE_FRACTION):
        self.models: Dict[str, ModelSpec] = {}
        for m in models:
            if m.id in self.models:
                raise ConfigError(f"duplicate model id {m.id}")
            self.models[m.id] = m
        self.topo = topo
        self.reserve_fraction = reserve_fraction
        self._plans: Dict[str, List[ExecutionPlan]] = {}

    def __getitem__(self, model_id: str) -> ModelSpec:
        try:
            return self.models[model_id]
        except KeyError:
            raise ConfigError(f"unknown model {model_id!r}") from None

    def __contains__(self, model_id: str) -> bool:
        return model_id in self.models

    def plans(self, model_id: str) -> List[ExecutionPlan]:
        if model_id not in self._plans:
            self._plans[model_id] = enumerate_valid_plans(self[model_id], self.topo, self.reserve_fraction)
        return self._plans[model_id]

    def kv_capacity(self, model_id: str, plan: ExecutionPlan) -> int:
        return kv_capacity_tokens(self[model_id], plan, self.topo, self.reserve_fraction)


def models_from_json(data: Sequence[dict]) -> List[ModelSpec]:
    if isinstance(data, dict):
        data = data.get("models", [])
    return [ModelSpec.from_dict(d) for d in data]
