"""Layout enumeration and ranking: which (dp, tp, pp, mode) runs fastest.

Step latency composes the per-layer cost model with the 1F1B pipeline: the
model's layers split evenly over pp stages, every data replica pipelines its
share of the global batch's micro-batches, and the step is the pipeline
makespan. Throughput is tokens per second per device. Absolute numbers are
model estimates; the planner's claim is the ordering.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import pipeline
from .collectives import ConfigurationError, World, build_groups
from .config import PlanConfig
from .costmodel import (
    DPMOE,
    LatencyBreakdown,
    MemoryEstimate,
    ParallelDegrees,
    activation_bytes,
    link_profile,
    memory_per_device,
    model_forward_breakdown,
)

ESTIMATE_BANNER = (
    "predicted ordering from an analytical model; absolute throughputs are estimates, not measurements"
)


@dataclass(frozen=True)
class StepEstimate:
    """One training step of a layout: per-stage latencies and pipeline makespan."""

    micro_batches: int
    micro_per_replica: int
    stage_forward: float
    stage_backward: float
    send_lat: float
    makespan: float


@dataclass(frozen=True)
class PlanRow:
    """One enumerated layout with its memory and speed predictions."""

    mode: str
    dp: int
    tp: int
    pp: int
    ep_world: int
    device_count: int
    zero_enabled: bool
    mem_bytes: float
    feasible: bool
    step_latency: float
    throughput: float  # tokens / s / device
    forward: LatencyBreakdown  # one micro-batch through the whole model

    def as_dict(self) -> dict:
        return {
            "mode": self.mode,
            "dp": self.dp,
            "tp": self.tp,
            "pp": self.pp,
            "ep_world": self.ep_world,
            "device_count": self.device_count,
            "zero_enabled": self.zero_enabled,
            "mem_bytes": self.mem_bytes,
            "feasible": self.feasible,
            "step_latency": self.step_latency,
            "throughput": self.throughput,
            "forward": self.forward.as_dict(),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "PlanRow":
        fwd = {k: v for k, v in raw["forward"].items() if k != "total"}
        return cls(
            mode=raw["mode"],
            dp=raw["dp"],
            tp=raw["tp"],
            pp=raw["pp"],
            ep_world=raw["ep_world"],
            device_count=raw["device_count"],
            zero_enabled=raw["zero_enabled"],
            mem_bytes=raw["mem_bytes"],
            feasible=raw["feasible"],
            step_latency=raw["step_latency"],
            throughput=raw["throughput"],
            forward=LatencyBreakdown(**fwd),
        )


def estimate_step(shape, degrees, profile, micro_batches: int) -> StepEstimate:
    """Pipeline makespan of one global batch on one data replica.

    Layers split evenly across stages; backward doubles compute and repeats
    communication; inter-stage activation transfer is charged serially on the
    sender when pp > 1.
    """
    fwd = model_forward_breakdown(shape, degrees, profile)
    bwd = fwd.backward()
    stage_f = fwd.total / degrees.pp
    stage_b = bwd.total / degrees.pp
    send = (
        profile.startup + activation_bytes(shape) / link_profile(degrees, profile).pp_bw
        if degrees.pp > 1
        else 0.0
    )
    per_replica = math.ceil(micro_batches / degrees.dp)
    timeline = pipeline.simulate(pipeline.uniform_stages(degrees.pp, stage_f, stage_b, send), per_replica)
    return StepEstimate(
        micro_batches=micro_batches,
        micro_per_replica=per_replica,
        stage_forward=stage_f,
        stage_backward=stage_b,
        send_lat=send,
        makespan=timeline.makespan,
    )


def _layout_valid(cfg: PlanConfig, degrees: ParallelDegrees) -> bool:
    """Apply the group-construction divisibility rules to one candidate."""
    world = World(cfg.cluster.nodes, cfg.cluster.devices_per_node)
    # a dense model has no expert placement to constrain
    experts = cfg.model.experts if cfg.model.moe_layer_count else degrees.ep_world
    try:
        build_groups(world, degrees, num_experts=experts)
    except ConfigurationError:
        return False
    return True


def _divisors(n: int) -> list[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


def enumerate_configs(cfg: PlanConfig) -> list[PlanRow]:
    """Every valid (mode, dp, tp, pp) filling the cluster, costed and checked.

    Rows that exceed device memory are kept with feasible=False so the report
    can show why a layout is out.
    """
    devices = cfg.cluster.device_count
    tensor_options = cfg.constraints.tensor_degrees or _divisors(devices)
    rows = []
    for mode in sorted(cfg.constraints.modes):
        for tp in sorted(tensor_options):
            if devices % tp != 0:
                continue
            for pp in _divisors(devices // tp):
                if pp > cfg.model.layers:
                    continue  # a stage needs at least one layer
                dp = devices // (tp * pp)
                degrees = ParallelDegrees(dp=dp, tp=tp, pp=pp, mode=mode)
                if not _layout_valid(cfg, degrees):
                    continue
                zero = cfg.constraints.zero_dpmoe if mode == DPMOE else cfg.constraints.zero_ppmoe
                mem: MemoryEstimate = memory_per_device(cfg.model, degrees, cfg.cluster, zero_enabled=zero)
                step = estimate_step(cfg.model, degrees, cfg.cluster, cfg.constraints.micro_batches)
                tokens = cfg.model.tokens * cfg.constraints.micro_batches
                throughput = tokens / (step.makespan * devices)
                rows.append(
                    PlanRow(
                        mode=mode,
                        dp=dp,
                        tp=tp,
                        pp=pp,
                        ep_world=degrees.ep_world,
                        device_count=devices,
                        zero_enabled=zero,
                        mem_bytes=mem.bytes_per_device,
                        feasible=mem.feasible,
                        step_latency=step.makespan,
                        throughput=throughput,
                        forward=model_forward_breakdown(cfg.model, degrees, cfg.cluster),
                    )
                )
    return rows


def rank_rows(rows: list[PlanRow]) -> list[PlanRow]:
    """Feasible rows by descending throughput (ties: fewer devices, lower pp);
    infeasible rows trail in the same order."""
    key = lambda r: (-r.throughput, r.device_count, r.pp, r.mode, r.tp, r.dp)
    feasible = sorted((r for r in rows if r.feasible), key=key)
    infeasible = sorted((r for r in rows if not r.feasible), key=key)
    return feasible + infeasible


def find_row(rows: list[PlanRow], mode: str, dp: int, tp: int, pp: int) -> PlanRow:
    for r in rows:
        if (r.mode, r.dp, r.tp, r.pp) == (mode, dp, tp, pp):
            return r
    raise KeyError(f"no row for mode={mode} dp={dp} tp={tp} pp={pp}")
