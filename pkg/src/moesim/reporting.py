"""Deterministic rendering of plans, breakdowns and timelines.

Identical inputs produce byte-identical text in every format; the JSON
payloads carry enough to re-render the exact same table (the ``report``
subcommand round-trip).
"""

from __future__ import annotations

import json

from .costmodel import BreakdownReport
from .pipeline import Timeline
from .planner import ESTIMATE_BANNER, PlanRow


def _table(headers: list[str], rows: list[list[str]], align_right: set[int]) -> str:
    widths = [len(h) for h in headers]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    out = []

    def fmt_line(cells):
        parts = []
        for i, cell in enumerate(cells):
            parts.append(cell.rjust(widths[i]) if i in align_right else cell.ljust(widths[i]))
        return "  ".join(parts).rstrip()

    out.append(fmt_line(headers))
    out.append("  ".join("-" * w for w in widths))
    out.extend(fmt_line(r) for r in rows)
    return "\n".join(out)


# ------------------------------------------------------------------- plans


def check_rows(meta: dict, rows: list[PlanRow]) -> None:
    """Emit-time consistency: throughput must recompute from its own fields."""
    tokens = meta["tokens_per_micro"] * meta["micro_batches"]
    for r in rows:
        expected = tokens / (r.step_latency * r.device_count)
        if abs(expected - r.throughput) > 1e-9 * max(1.0, abs(expected)):
            raise ValueError(
                f"inconsistent row {r.mode} dp={r.dp} tp={r.tp} pp={r.pp}: "
                f"throughput {r.throughput} != {expected}"
            )


def plan_payload(meta: dict, rows: list[PlanRow]) -> dict:
    check_rows(meta, rows)
    return {"banner": ESTIMATE_BANNER, "meta": meta, "rows": [r.as_dict() for r in rows]}


def plan_payload_from_json(text: str) -> tuple[dict, list[PlanRow]]:
    blob = json.loads(text)
    for key in ("banner", "meta", "rows"):
        if key not in blob:
            raise ValueError(f"plan JSON is missing the {key!r} field")
    return blob["meta"], [PlanRow.from_dict(r) for r in blob["rows"]]


def _plan_cells(rows: list[PlanRow]) -> list[list[str]]:
    cells = []
    for i, r in enumerate(rows, start=1):
        cells.append(
            [
                str(i),
                r.mode,
                str(r.dp),
                str(r.tp),
                str(r.pp),
                str(r.ep_world),
                str(r.device_count),
                f"{r.mem_bytes / 1e9:.2f}",
                "yes" if r.feasible else "no",
                f"{r.step_latency:.6g}",
                f"{r.throughput:.1f}",
            ]
        )
    return cells


def render_plan_table(meta: dict, rows: list[PlanRow]) -> str:
    check_rows(meta, rows)
    headers = ["#", "mode", "dp", "tp", "pp", "ep", "devices", "mem_gb", "feasible", "step_s", "tok/s/dev"]
    body = _table(headers, _plan_cells(rows), align_right={0, 2, 3, 4, 5, 6, 7, 9, 10})
    return f"note: {ESTIMATE_BANNER}\n{body}\n"


def plan_to_csv(meta: dict, rows: list[PlanRow]) -> str:
    check_rows(meta, rows)
    header = "mode,dp,tp,pp,ep,devices,zero,mem_bytes,feasible,step_latency,throughput"
    lines = [header]
    for r in rows:
        lines.append(
            f"{r.mode},{r.dp},{r.tp},{r.pp},{r.ep_world},{r.device_count},"
            f"{str(r.zero_enabled).lower()},{r.mem_bytes!r},{str(r.feasible).lower()},"
            f"{r.step_latency!r},{r.throughput!r}"
        )
    return "\n".join(lines) + "\n"


def plan_to_json(meta: dict, rows: list[PlanRow]) -> str:
    return json.dumps(plan_payload(meta, rows), indent=2) + "\n"


# --------------------------------------------------------------- breakdowns


def render_breakdown_table(report: BreakdownReport, title: str) -> str:
    headers = ["component", f"time_{report.unit}", "pct_total", "pct_moe"]
    rows = []
    for r in report.rows:
        rows.append(
            [
                r.name,
                f"{r.value:.6g}",
                f"{r.pct_total:.1f}%",
                f"{r.pct_moe:.1f}%" if r.pct_moe is not None else "-",
            ]
        )
    body = _table(headers, rows, align_right={1, 2, 3})
    total_line = f"total: {report.total:.6g} {report.unit}"
    if report.moe_total is not None:
        total_line += f"  (moe subtotal: {report.moe_total:.6g} {report.unit})"
    return f"{title}\n{body}\n{total_line}\n"


def breakdown_to_csv(report: BreakdownReport) -> str:
    lines = ["component,value,pct_total,pct_moe"]
    for r in report.rows:
        moe = "" if r.pct_moe is None else repr(r.pct_moe)
        lines.append(f"{r.name},{r.value!r},{r.pct_total!r},{moe}")
    return "\n".join(lines) + "\n"


def breakdown_to_json(report: BreakdownReport, inputs: dict | None = None) -> str:
    payload = report.as_dict()
    if inputs is not None:
        payload["inputs"] = inputs
    return json.dumps(payload, indent=2) + "\n"


# ---------------------------------------------------------------- timelines


def render_timeline_summary(timeline: Timeline) -> str:
    busy = sum(e.duration for e in timeline.events if e.kind in ("F", "B"))
    lines = [
        f"stages:          {timeline.num_stages}",
        f"micro-batches:   {timeline.num_micro}",
        f"events:          {len(timeline.events)}",
        f"makespan:        {timeline.makespan:.6g} s",
        f"compute time:    {busy:.6g} s",
        f"bubble fraction: {timeline.bubble_fraction:.6g}",
    ]
    return "\n".join(lines) + "\n"


def timeline_to_csv(timeline: Timeline) -> str:
    lines = ["stage,micro,kind,start,end"]
    for e in timeline.events:
        lines.append(f"{e.stage},{e.micro},{e.kind},{e.start!r},{e.end!r}")
    return "\n".join(lines) + "\n"
