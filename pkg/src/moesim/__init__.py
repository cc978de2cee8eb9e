"""Deterministic desk-scale simulator and planner for MoE parallel training.

The package has three faces:

- a functional reference of the MoE layer under two parallel architectures
  (all-to-all token dispatch vs index-slice dispatch with all-reduce combine),
  built on a tiny reverse-mode tensor engine and a simulated multi-rank world
  with byte-accurate traffic accounting;
- an analytical cost model (collective latencies, FLOPs, parameter counts,
  per-device memory) plus a 1F1B pipeline simulator;
- a planner CLI that enumerates parallel layouts, ranks them by predicted
  throughput, and renders reports, traces and figures.
"""

from .collectives import ConfigurationError, GroupSet, ProcessGroup, TrafficLedger, World, build_groups
from .config import ConfigError, Constraints, PlanConfig, load_plan_config, plan_config_from_dict
from .costmodel import (
    DPMOE,
    PPMOE,
    BreakdownReport,
    ClusterProfile,
    LatencyBreakdown,
    MemoryEstimate,
    ModelShape,
    ParallelDegrees,
    ParamCounts,
    breakdown_report,
    flops_ffn_per_expert,
    lat_all_reduce,
    lat_all_to_all,
    layer_forward_latency,
    memory_per_device,
    model_forward_breakdown,
    param_count,
    ratio_a2a_ffn,
    ratio_a2a_ffn_bound,
    ratio_allreduce_cal,
)
from .moe import (
    DispatchPlan,
    ExpertFfn,
    GateOutput,
    GateParams,
    LayerConfig,
    MoeLayerWeights,
    aux_loss,
    build_dispatch_plan,
    dense_tp_ffn_forward,
    dpmoe_forward,
    gate_top1,
    global_batch_equivalence,
    ppmoe_forward,
    sync_gate_gradients,
)
from .pipeline import StageSpec, Timeline, schedule_1f1b, simulate, to_chrome_trace, uniform_stages
from .planner import PlanRow, enumerate_configs, estimate_step, rank_rows
from .tensor import GradTape, Rng, Tensor, backward, zeros

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "GroupSet",
    "ProcessGroup",
    "TrafficLedger",
    "World",
    "build_groups",
    "ConfigError",
    "Constraints",
    "PlanConfig",
    "load_plan_config",
    "plan_config_from_dict",
    "DPMOE",
    "PPMOE",
    "BreakdownReport",
    "ClusterProfile",
    "LatencyBreakdown",
    "MemoryEstimate",
    "ModelShape",
    "ParallelDegrees",
    "ParamCounts",
    "breakdown_report",
    "flops_ffn_per_expert",
    "lat_all_reduce",
    "lat_all_to_all",
    "layer_forward_latency",
    "memory_per_device",
    "model_forward_breakdown",
    "param_count",
    "ratio_a2a_ffn",
    "ratio_a2a_ffn_bound",
    "ratio_allreduce_cal",
    "DispatchPlan",
    "ExpertFfn",
    "GateOutput",
    "GateParams",
    "LayerConfig",
    "MoeLayerWeights",
    "aux_loss",
    "build_dispatch_plan",
    "dense_tp_ffn_forward",
    "dpmoe_forward",
    "gate_top1",
    "global_batch_equivalence",
    "ppmoe_forward",
    "sync_gate_gradients",
    "StageSpec",
    "Timeline",
    "schedule_1f1b",
    "simulate",
    "to_chrome_trace",
    "uniform_stages",
    "PlanRow",
    "enumerate_configs",
    "estimate_step",
    "rank_rows",
    "GradTape",
    "Rng",
    "Tensor",
    "backward",
    "zeros",
]
