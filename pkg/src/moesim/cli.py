"""Command-line interface: verify, plan, breakdown, simulate, report.

Exit codes: 0 success, 1 validation failure (bad flags, bad config, failed
verification), 2 no feasible layout.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import costmodel as cm
from . import pipeline as pl
from . import reporting
from .config import ConfigError, load_plan_config
from .costmodel import MODES, ParallelDegrees
from .moe import LayerConfig
from .planner import enumerate_configs, estimate_step, rank_rows
from .verification import run_verification

EXIT_OK, EXIT_VALIDATION, EXIT_NO_LAYOUT = 0, 1, 2

_COMPONENT_LABELS = [
    ("gating", "gating", True),
    ("a2a_first", "first all-to-all", True),
    ("a2a_second", "second all-to-all", True),
    ("expert_compute", "expert compute", True),
    ("moe_all_reduce", "moe all-reduce", True),
    ("ffn_compute", "ffn forward", False),
    ("ffn_all_reduce", "ffn all-reduce", False),
    ("attention_compute", "attention", False),
    ("attention_all_reduce", "attention all-reduce", False),
    ("others", "others", False),
]


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2; usage problems are exit 1 here
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="moesim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0, help="seed for randomized suites")
        p.add_argument("--format", choices=("table", "csv", "json"), default="table")
        p.add_argument("--out", help="also write the rendered output (or trace) to this path")
        p.add_argument("--fig", help="render a figure of the result to this path")

    p_verify = sub.add_parser("verify", help="run the property/equivalence suites")
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.add_argument("--config", help="planner config; its optional 'layer' block parametrizes an extra check")

    p_plan = sub.add_parser("plan", help="enumerate and rank parallel layouts")
    p_plan.add_argument("--config", required=True)
    common(p_plan)

    p_break = sub.add_parser("breakdown", help="forward-time component percentages")
    src = p_break.add_mutually_exclusive_group(required=True)
    src.add_argument("--fixture", help="JSON of raw measured component times")
    src.add_argument("--config", help="planner config to model a forward step from")
    p_break.add_argument("--mode", choices=MODES, help="architecture (with --config)")
    p_break.add_argument("--dtp", help="data,tensor,pipeline degrees, e.g. 1,8,4 (with --config)")
    common(p_break)

    p_sim = sub.add_parser("simulate", help="1F1B pipeline timeline and trace export")
    src = p_sim.add_mutually_exclusive_group(required=True)
    src.add_argument("--fixture", help="JSON with per-stage latencies and micro-batch count")
    src.add_argument("--config", help="planner config to derive stage latencies from")
    p_sim.add_argument("--mode", choices=MODES, help="architecture (with --config)")
    p_sim.add_argument("--dtp", help="data,tensor,pipeline degrees (with --config)")
    p_sim.add_argument("--micro-batches", type=int, help="override micro-batch count")
    common(p_sim)

    p_rep = sub.add_parser("report", help="re-render stored plan/breakdown JSON")
    p_rep.add_argument("input", help="JSON produced by plan/breakdown --format json")
    common(p_rep)
    return parser


def _emit(text: str, out_path: str | None) -> None:
    sys.stdout.write(text)
    if out_path:
        Path(out_path).write_text(text)


def _parse_dtp(raw: str | None) -> tuple[int, int, int]:
    if raw is None:
        raise UsageError("--dtp D,T,P is required together with --config")
    parts = raw.split(",")
    if len(parts) != 3:
        raise UsageError(f"--dtp expects three comma-separated integers, got {raw!r}")
    try:
        d, t, p = (int(x) for x in parts)
    except ValueError as err:
        raise UsageError(f"--dtp expects integers: {err}") from err
    return d, t, p


def cmd_verify(args) -> int:
    failures = run_verification(args.seed)
    if args.config:
        cfg = load_plan_config(args.config)
        if cfg.layer:
            layer_cfg = LayerConfig.from_dict(cfg.layer)
            _layer_config_check(layer_cfg)
            print(f"PASS layer config check ({json.dumps(layer_cfg.to_dict(), sort_keys=True)})")
    return EXIT_VALIDATION if failures else EXIT_OK


def _layer_config_check(layer_cfg: LayerConfig) -> None:
    """Architectures must agree on a layer built from the ingested config."""
    import numpy as np

    from . import moe
    from . import tensor as T
    from .collectives import EP, ProcessGroup, World

    weights = moe.MoeLayerWeights.init(layer_cfg.hidden, layer_cfg.experts, T.Rng(layer_cfg.seed))
    hidden = T.Rng(layer_cfg.seed, 99).normal((8, layer_cfg.hidden))
    out_pp, _ = moe.ppmoe_forward(
        World(1, layer_cfg.tp),
        ProcessGroup(EP, tuple(range(layer_cfg.tp))),
        T.tensor(hidden),
        weights.gate,
        weights.shard(layer_cfg.tp),
        weight_scaling=layer_cfg.weight_scaling,
        dropout_p=layer_cfg.dropout_p,
        rng=T.Rng(layer_cfg.seed, 5),
    )
    [(out_dp, _)] = moe.dpmoe_forward(
        World(1, 1),
        ProcessGroup(EP, (0,)),
        [T.tensor(hidden)],
        weights.gate,
        experts_by_rank=weights.shard(1),
        capacity_factor=layer_cfg.capacity_factor,
        weight_scaling=layer_cfg.weight_scaling,
        dropout_p=layer_cfg.dropout_p,
        rng=T.Rng(layer_cfg.seed, 5),
    )
    if layer_cfg.dropout_p == 0.0 and np.abs(out_pp.data - out_dp.data).max() >= 1e-9:
        raise AssertionError("layer config check: architectures disagree")


def cmd_plan(args) -> int:
    cfg = load_plan_config(args.config)
    rows = rank_rows(enumerate_configs(cfg))
    meta = {
        "tokens_per_micro": cfg.model.tokens,
        "micro_batches": cfg.constraints.micro_batches,
        "device_count": cfg.cluster.device_count,
    }
    if not rows:
        _emit("no feasible layout\n", args.out)
        return EXIT_NO_LAYOUT
    if args.format == "table":
        text = reporting.render_plan_table(meta, rows)
    elif args.format == "csv":
        text = reporting.plan_to_csv(meta, rows)
    else:
        text = reporting.plan_to_json(meta, rows)
    if not any(r.feasible for r in rows):
        text += "no feasible layout: every candidate exceeds device memory\n"
    _emit(text, args.out)
    if args.fig:
        from .figures import save_plan_figure

        save_plan_figure(rows, args.fig)
    return EXIT_OK if any(r.feasible for r in rows) else EXIT_NO_LAYOUT


def _breakdown_from_fixture(path: str) -> tuple[cm.BreakdownReport, dict]:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as err:
        raise ConfigError(f"fixture not found: {path}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"fixture {path} is not valid JSON ({err})") from err
    for key in ("total", "components"):
        if key not in raw:
            raise ConfigError(f"fixture error at $.{key}: field is required")
    components = [(c["name"], float(c["value"]), bool(c.get("moe", False))) for c in raw["components"]]
    combined = [(c["name"], list(c["of"])) for c in raw.get("combined", [])]
    report = cm.breakdown_report(
        total=float(raw["total"]),
        components=components,
        moe_total=raw.get("moe_total"),
        combined=combined,
        unit=raw.get("unit", "ms"),
    )
    return report, {"fixture": raw}


def _breakdown_from_config(args) -> tuple[cm.BreakdownReport, dict]:
    cfg = load_plan_config(args.config)
    if args.mode is None:
        raise UsageError("--mode is required together with --config")
    d, t, p = _parse_dtp(args.dtp)
    degrees = ParallelDegrees(dp=d, tp=t, pp=p, mode=args.mode)
    fwd = cm.model_forward_breakdown(cfg.model, degrees, cfg.cluster, include_gating=True)
    components = []
    moe_total = 0.0
    for field, label, is_moe in _COMPONENT_LABELS:
        value = getattr(fwd, field) * 1e3  # seconds -> ms
        if value == 0.0:
            continue
        components.append((label, value, is_moe))
        if is_moe:
            moe_total += value
    combined = []
    names = {name for name, _, _ in components}
    if {"first all-to-all", "second all-to-all"} <= names:
        combined.append(("all-to-all combined", ["first all-to-all", "second all-to-all"]))
    report = cm.breakdown_report(
        total=fwd.total * 1e3,
        components=components,
        moe_total=moe_total or None,
        combined=combined,
        unit="ms",
    )
    inputs = {
        "model": cfg.model.__dict__,
        "cluster": cfg.cluster.__dict__,
        "degrees": {"dp": d, "tp": t, "pp": p, "mode": args.mode},
    }
    return report, inputs


def cmd_breakdown(args) -> int:
    report, inputs = _breakdown_from_fixture(args.fixture) if args.fixture else _breakdown_from_config(args)
    if args.format == "table":
        text = reporting.render_breakdown_table(report, "forward-time breakdown")
    elif args.format == "csv":
        text = reporting.breakdown_to_csv(report)
    else:
        text = reporting.breakdown_to_json(report, inputs)
    _emit(text, args.out)
    if args.fig:
        from .figures import save_breakdown_figure

        save_breakdown_figure(report, args.fig)
    return EXIT_OK


def _stages_from_fixture(path: str, micro_override: int | None) -> tuple[list[pl.StageSpec], int]:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as err:
        raise ConfigError(f"fixture not found: {path}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"fixture {path} is not valid JSON ({err})") from err
    micro = micro_override or raw.get("micro_batches")
    if not micro:
        raise ConfigError("fixture error at $.micro_batches: field is required")
    if "uniform" in raw:
        u = raw["uniform"]
        stages = pl.uniform_stages(int(u["stages"]), float(u["t_f"]), float(u["t_b"]), float(u.get("send_lat", 0.0)))
    elif "stages" in raw:
        stages = [
            pl.StageSpec(i, float(s["t_f"]), float(s["t_b"]), float(s.get("send_lat", 0.0)))
            for i, s in enumerate(raw["stages"])
        ]
    else:
        raise ConfigError("fixture error at $: needs either 'stages' or 'uniform'")
    return stages, int(micro)


def _stages_from_config(args) -> tuple[list[pl.StageSpec], int]:
    cfg = load_plan_config(args.config)
    if args.mode is None:
        raise UsageError("--mode is required together with --config")
    d, t, p = _parse_dtp(args.dtp)
    degrees = ParallelDegrees(dp=d, tp=t, pp=p, mode=args.mode)
    micro = args.micro_batches or cfg.constraints.micro_batches
    step = estimate_step(cfg.model, degrees, cfg.cluster, micro)
    stages = pl.uniform_stages(p, step.stage_forward, step.stage_backward, step.send_lat)
    return stages, step.micro_per_replica


def cmd_simulate(args) -> int:
    if args.fixture:
        stages, micro = _stages_from_fixture(args.fixture, args.micro_batches)
    else:
        stages, micro = _stages_from_config(args)
    timeline = pl.simulate(stages, micro)
    trace_text = json.dumps(pl.to_chrome_trace(timeline), indent=2) + "\n"
    if args.format == "table":
        sys.stdout.write(reporting.render_timeline_summary(timeline))
    elif args.format == "csv":
        sys.stdout.write(reporting.timeline_to_csv(timeline))
    else:
        sys.stdout.write(trace_text)
    if args.out:
        Path(args.out).write_text(trace_text)
    if args.fig:
        from .figures import save_timeline_figure

        save_timeline_figure(timeline, args.fig)
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        text = Path(args.input).read_text()
    except FileNotFoundError as err:
        raise ConfigError(f"input not found: {args.input}") from err
    try:
        blob = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{args.input} is not valid JSON ({err})") from err
    if isinstance(blob, dict) and "rows" in blob and "banner" in blob:
        meta, rows = reporting.plan_payload_from_json(text)
        rendered = reporting.render_plan_table(meta, rows) if args.format == "table" else reporting.plan_to_csv(meta, rows)
        if args.format == "json":
            rendered = reporting.plan_to_json(meta, rows)
    elif isinstance(blob, dict) and "rows" in blob and "unit" in blob:
        report = cm.BreakdownReport(
            unit=blob["unit"],
            total=blob["total"],
            moe_total=blob.get("moe_total"),
            rows=tuple(
                cm.BreakdownRow(r["name"], r["value"], r["pct_total"], r.get("pct_moe")) for r in blob["rows"]
            ),
        )
        if args.format == "table":
            rendered = reporting.render_breakdown_table(report, "forward-time breakdown")
        elif args.format == "csv":
            rendered = reporting.breakdown_to_csv(report)
        else:
            rendered = reporting.breakdown_to_json(report, blob.get("inputs"))
    else:
        raise ConfigError(f"{args.input} is not a stored plan or breakdown payload")
    _emit(rendered, args.out)
    return EXIT_OK


_COMMANDS = {
    "verify": cmd_verify,
    "plan": cmd_plan,
    "breakdown": cmd_breakdown,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except ConfigError as err:
        print(str(err), file=sys.stderr)
        return EXIT_VALIDATION
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
