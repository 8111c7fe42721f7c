"""Empirical output-length distributions and deterministic per-request sampling."""
from __future__ import annotations

import bisect
import csv
import hashlib
import math
import struct
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Sequence, Tuple

from .errors import ConfigError


@dataclass(frozen=True)
class OutputLengthEcdf:
    model_id: str
    sorted_lengths: Tuple[int, ...]

    def __post_init__(self):
        if not self.sorted_lengths:
            raise ConfigError(f"eCDF for {self.model_id!r} is empty")
        if any(b < a for a, b in zip(self.sorted_lengths, self.sorted_lengths[1:])):
            raise ConfigError(f"eCDF for {self.model_id!r} is not sorted")
        if self.sorted_lengths[0] < 0:
            raise ConfigError(f"eCDF for {self.model_id!r} has negative lengths")

    @property
    def n(self) -> int:
        return len(self.sorted_lengths)

    def cdf(self, x: float) -> float:
        return bisect.bisect_right(self.sorted_lengths, x) / self.n

    def quantile(self, u: float) -> int:
        """Smallest stored length whose cumulative probability is >= u."""
        i = max(1, math.ceil(u * self.n))
        return self.sorted_lengths[min(i, self.n) - 1]


def build_ecdf(trace: Iterable[int], model_id: str = "") -> OutputLengthEcdf:
    values = sorted(int(v) for v in trace)
    if not values:
        raise ConfigError("cannot build an eCDF from an empty trace")
    return OutputLengthEcdf(model_id, tuple(values))


def uniform_variate(seed: int, request_id: str) -> float:
    """Deterministic U[0,1) from a 64-bit hash of (seed, request_id)."""
    digest = hashlib.blake2b(f"{seed}\x1f{request_id}".encode(), digest_size=8).digest()
    (v,) = struct.unpack("<Q", digest)
    return (v >> 11) * (1.0 / (1 << 53))


def sample_output_length(
    ecdf: OutputLengthEcdf,
    l_in: int,
    l_max: int,
    cap: Optional[int] = None,
    seed: int = 0,
    request_id: str = "",
) -> int:
    if l_in > l_max:
        raise ConfigError(f"request {request_id!r}: input length {l_in} exceeds max_seq_len {l_max}")
    x = ecdf.quantile(uniform_variate(seed, request_id))
    out = min(x, l_max - l_in)
    if cap is not None:
        out = min(out, cap)
    return max(0, out)


def read_trace_csv(path) -> Dict[str, OutputLengthEcdf]:
    """CSV with header model_id,output_len -> one eCDF per model."""
    per_model: Dict[str, list] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"model_id", "output_len"} <= set(reader.fieldnames):
            raise ConfigError(f"{path}: expected header model_id,output_len")
        for lineno, row in enumerate(reader, start=2):
            try:
                per_model.setdefault(row["model_id"], []).append(int(row["output_len"]))
            except ValueError as e:
                raise ConfigError(f"{path}:{lineno}: {e}") from None
    return {m: build_ecdf(v, m) for m, v in per_model.items()}


def ecdfs_to_dict(ecdfs: Dict[str, OutputLengthEcdf]) -> dict:
    return {"format_version": 1, "ecdf": {m: list(e.sorted_lengths) for m, e in sorted(ecdfs.items())}}


def ecdfs_from_dict(d: dict) -> Dict[str, OutputLengthEcdf]:
    if d.get("format_version", 1) != 1:
        raise ConfigError(f"unsupported ecdf format_version {d.get('format_version')}")
    return {m: OutputLengthEcdf(m, tuple(int(v) for v in vals)) for m, vals in d.get("ecdf", {}).items()}
