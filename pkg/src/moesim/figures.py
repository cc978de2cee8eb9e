"""Matplotlib figure rendering for plans, breakdowns and pipeline timelines."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .costmodel import BreakdownReport
from .pipeline import Timeline
from .planner import PlanRow

_MODE_COLOR = {"ppmoe": "#2c7fb8", "dpmoe": "#d95f0e"}


def save_plan_figure(rows: list[PlanRow], path: str) -> None:
    """Horizontal throughput bars, one per layout; infeasible layouts hatched."""
    labels = [f"{r.mode} d{r.dp} t{r.tp} p{r.pp}" for r in rows]
    values = [r.throughput for r in rows]
    colors = [_MODE_COLOR.get(r.mode, "#777777") for r in rows]
    hatches = ["" if r.feasible else "//" for r in rows]
    height = max(2.0, 0.32 * len(rows) + 1.2)
    fig, ax = plt.subplots(figsize=(8, height))
    bars = ax.barh(range(len(rows)), values, color=colors, edgecolor="black", linewidth=0.4)
    for bar, hatch, feasible in zip(bars, hatches, (r.feasible for r in rows)):
        bar.set_hatch(hatch)
        if not feasible:
            bar.set_alpha(0.45)
    ax.set_yticks(range(len(rows)), labels, fontsize=8)
    ax.invert_yaxis()
    ax.set_xlabel("predicted tokens / s / device")
    ax.set_title("layout throughput (hatched = over memory budget)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_breakdown_figure(report: BreakdownReport, path: str, title: str = "forward-time breakdown") -> None:
    """Bar chart of each component's share of the total."""
    names = [r.name for r in report.rows]
    pcts = [r.pct_total for r in report.rows]
    fig, ax = plt.subplots(figsize=(max(6.0, 1.1 * len(names)), 4))
    ax.bar(range(len(names)), pcts, color="#2c7fb8")
    ax.set_xticks(range(len(names)), names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("% of total")
    ax.set_title(title)
    for i, pct in enumerate(pcts):
        ax.text(i, pct, f"{pct:.1f}", ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_timeline_figure(timeline: Timeline, path: str) -> None:
    """Gantt chart: one lane per stage, forward/backward/send blocks."""
    kind_color = {"F": "#2c7fb8", "B": "#d95f0e", "SendF": "#bbbbbb", "SendB": "#888888"}
    fig, ax = plt.subplots(figsize=(10, 0.6 * timeline.num_stages + 1.5))
    for ev in timeline.events:
        ax.broken_barh(
            [(ev.start, ev.duration)],
            (ev.stage - 0.4, 0.8),
            facecolors=kind_color[ev.kind],
            edgecolor="white",
            linewidth=0.3,
        )
        if ev.kind in ("F", "B") and timeline.num_micro <= 32:
            ax.text(
                ev.start + ev.duration / 2,
                ev.stage,
                str(ev.micro),
                ha="center",
                va="center",
                fontsize=6,
                color="white",
            )
    ax.set_yticks(range(timeline.num_stages), [f"stage {i}" for i in range(timeline.num_stages)])
    ax.invert_yaxis()
    ax.set_xlabel("time (s)")
    ax.set_title(
        f"1F1B schedule: {timeline.num_micro} micro-batches, "
        f"makespan {timeline.makespan:.6g} s, bubble {timeline.bubble_fraction:.3f}"
    )
    handles = [plt.Rectangle((0, 0), 1, 1, color=kind_color[k]) for k in ("F", "B")]
    ax.legend(handles, ["forward", "backward"], loc="upper left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
