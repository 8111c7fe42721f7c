"""Stage planning and iteration-level simulation for offline multi-LLM applications."""
from ._backend import BACKEND
from .catalog import Catalog, ExecutionPlan, GpuTopology, ModelSpec
from .costmodel import CostTable, IterationDescriptor, fit_coefficients, flops_decode, flops_prefill, iter_latency
from .errors import ConfigError, FitError, InfeasibleError, InvalidStageError, PlanMismatchError, StageSchedError
from .graph import AppGraph, Edge, RequestSpec, Workload, WorkloadState, fuse_self_loops, ready_models
from .sampler import OutputLengthEcdf, build_ecdf, sample_output_length
from .simulator import EngineConfig, SimRequest, SimResult, simulate_model

__version__ = "0.1.0"
