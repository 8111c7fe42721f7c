"""Reading and writing the versioned JSON files used by the CLI."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Dict, Mapping, Optional, Sequence

from .catalog import Catalog, GpuTopology, ModelSpec, DEFAULT_RESERVE_FRACTION, models_from_json
from .costmodel import CostTable
from .errors import ConfigError
from .graph import AppGraph, RequestSpec, Workload, requests_from_dict, requests_to_dict
from .sampler import OutputLengthEcdf, ecdfs_from_dict, ecdfs_to_dict, sample_output_length
from .simulator import EngineConfig


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj))


def read_json(path):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if isinstance(data, dict) and data.get("format_version", 1) != 1:
        raise ConfigError(f"{path}: unsupported format_version {data.get('format_version')}")
    return data


def models_to_dict(models: Sequence[ModelSpec]) -> dict:
    return {"format_version": 1, "models": [m.to_dict() for m in models]}


def gpus_to_dict(topo: GpuTopology, cfg: Optional[EngineConfig] = None,
                 reserve_fraction: float = DEFAULT_RESERVE_FRACTION) -> dict:
    d = {"format_version": 1, **topo.to_dict(), "reserve_fraction": reserve_fraction}
    if cfg is not None:
        d["engine"] = {"max_num_seqs": cfg.max_num_seqs}
        if cfg.kv_capacity_tokens is not None:
            d["engine"]["kv_capacity_tokens"] = cfg.kv_capacity_tokens
    return d


def gpus_from_dict(d: dict):
    topo = GpuTopology.from_dict(d)
    eng = d.get("engine", {})
    cfg = EngineConfig(int(eng.get("max_num_seqs", 256)),
                       None if eng.get("kv_capacity_tokens") is None else int(eng["kv_capacity_tokens"]))
    return topo, cfg, float(d.get("reserve_fraction", DEFAULT_RESERVE_FRACTION))


def lengths_to_dict(lengths: Mapping[str, int]) -> dict:
    return {"format_version": 1, "lengths": {k: int(v) for k, v in sorted(lengths.items())}}


def lengths_from_dict(d) -> Dict[str, int]:
    if isinstance(d, dict) and "lengths" in d:
        d = d["lengths"]
    try:
        return {str(k): int(v) for k, v in d.items()}
    except (AttributeError, TypeError, ValueError) as e:
        raise ConfigError(f"malformed lengths file: {e}") from None


def make_length_fn(catalog: Catalog, graph: AppGraph, ecdfs: Mapping[str, OutputLengthEcdf], seed: int,
                   known: Optional[Mapping[str, int]] = None) -> Callable[[RequestSpec, int], int]:
    """Output length per request: the known value if given, else a seeded eCDF sample."""

    def fn(spec: RequestSpec, l_in: int) -> int:
        mid = graph.model_of[spec.node_id]
        if known is not None:
            if spec.id not in known:
                raise ConfigError(f"no known output length for request {spec.id}")
            return int(known[spec.id])
        if mid not in ecdfs:
            raise ConfigError(f"no output-length eCDF for model {mid}")
        return sample_output_length(ecdfs[mid], l_in, catalog[mid].l_max, spec.cap, seed, spec.id)

    return fn


def build_workload(catalog: Catalog, graph: AppGraph, requests: Sequence[RequestSpec],
                   ecdfs: Mapping[str, OutputLengthEcdf], seed: int = 0,
                   known: Optional[Mapping[str, int]] = None) -> Workload:
    for n, mid in graph.nodes:
        if mid not in catalog:
            raise ConfigError(f"node {n} uses unknown model {mid}")
    l_max = {m: catalog[m].l_max for m in catalog.models}
    return Workload(graph, requests, make_length_fn(catalog, graph, ecdfs, seed, known), l_max)
