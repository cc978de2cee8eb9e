"""Planner configuration: JSON loading with strict schema validation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema

from .costmodel import MODES, ClusterProfile, ModelShape


class ConfigError(ValueError):
    """Configuration file failed validation; message carries the field path."""


@dataclass(frozen=True)
class Constraints:
    """Search-space limits and knobs for the layout enumeration."""

    micro_batches: int
    tensor_degrees: tuple[int, ...] | None = None  # None = every divisor
    modes: tuple[str, ...] = MODES
    capacity_factor: float = math.inf
    zero_dpmoe: bool = True
    zero_ppmoe: bool = False


@dataclass(frozen=True)
class PlanConfig:
    model: ModelShape
    cluster: ClusterProfile
    constraints: Constraints
    layer: dict | None = None  # optional MoE-layer block for the verify suites


def _schema() -> dict:
    text = resources.files("moesim").joinpath("schemas/plan_config.schema.json").read_text()
    return json.loads(text)


def validate_raw(raw: dict) -> None:
    validator = jsonschema.Draft202012Validator(_schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: e.json_path)
    if errors:
        first = errors[0]
        raise ConfigError(f"config error at {first.json_path}: {first.message}")


def plan_config_from_dict(raw: dict) -> PlanConfig:
    validate_raw(raw)
    m = raw["model"]
    c = raw["cluster"]
    k = raw["constraints"]
    try:
        model = ModelShape(
            layers=m["layers"],
            hidden=m["hidden"],
            heads=m["heads"],
            seq_len=m["seq_len"],
            vocab=m["vocab"],
            micro_batch=m["micro_batch"],
            experts=m.get("experts", 1),
            moe_every=m.get("moe_every", 2),
        )
        cluster = ClusterProfile(
            flops=c["flops_per_device"],
            bw_intra=c["intra_node_bw"],
            bw_inter=c["inter_node_bw"],
            startup=c.get("startup_latency", 0.0),
            nodes=c["nodes"],
            devices_per_node=c["devices_per_node"],
            mem_per_device=c["mem_per_device"],
        )
    except ValueError as err:
        raise ConfigError(f"config error: {err}") from err
    cf = k.get("capacity_factor", "inf")
    zero = k.get("zero", {})
    constraints = Constraints(
        micro_batches=k["micro_batches"],
        tensor_degrees=tuple(sorted(k["tensor_degrees"])) if "tensor_degrees" in k else None,
        modes=tuple(k.get("modes", list(MODES))),
        capacity_factor=math.inf if cf == "inf" else float(cf),
        zero_dpmoe=zero.get("dpmoe", True),
        zero_ppmoe=zero.get("ppmoe", False),
    )
    return PlanConfig(model=model, cluster=cluster, constraints=constraints, layer=raw.get("layer"))


def load_plan_config(path: str | Path) -> PlanConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as err:
        raise ConfigError(f"config file not found: {path}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config error: {path} is not valid JSON ({err})") from err
    if not isinstance(raw, dict):
        raise ConfigError("config error at $: top level must be an object")
    return plan_config_from_dict(raw)
