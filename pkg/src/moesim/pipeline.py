"""1F1B pipeline schedule generation and discrete-event simulation.

``schedule_1f1b`` fixes the per-stage op order: stage i of p warms up with
min(p - i, m) forwards, alternates one-backward-one-forward through steady
state, and drains the remaining backwards. ``simulate`` assigns event times
under the dependency rules (a forward needs the previous stage's forward plus
transfer; a backward needs the next stage's backward plus transfer) with
point-to-point sends charged serially on the sending stage.
"""

from __future__ import annotations

from dataclasses import dataclass

F, B, SEND_F, SEND_B = "F", "B", "SendF", "SendB"
_CAT = {F: "forward", B: "backward", SEND_F: "comm", SEND_B: "comm"}


@dataclass(frozen=True)
class StageSpec:
    """Per-micro-batch latencies of one pipeline stage."""

    stage_id: int
    t_f: float
    t_b: float
    send_lat: float = 0.0

    def __post_init__(self):
        if min(self.t_f, self.t_b, self.send_lat) < 0:
            raise ValueError(f"stage {self.stage_id} has negative latency")


@dataclass(frozen=True)
class TimelineEvent:
    stage: int
    micro: int
    kind: str
    start: float
    end: float

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class Timeline:
    """Executed schedule: events plus makespan and idle share."""

    events: tuple[TimelineEvent, ...]
    makespan: float
    bubble_fraction: float
    num_stages: int
    num_micro: int

    def stage_events(self, stage: int, kinds: tuple[str, ...] = (F, B)) -> list[TimelineEvent]:
        return sorted((e for e in self.events if e.stage == stage and e.kind in kinds), key=lambda e: e.start)


def uniform_stages(p: int, t_f: float, t_b: float, send_lat: float = 0.0) -> list[StageSpec]:
    return [StageSpec(i, t_f, t_b, send_lat) for i in range(p)]


def schedule_1f1b(p: int, m: int) -> list[list[tuple[str, int]]]:
    """Per-stage op order: warmup forwards, strict 1F1B alternation, drain.

    Micro-batches are 1-based. Every stage runs m forwards and m backwards.
    """
    if p < 1 or m < 1:
        raise ValueError(f"need at least one stage and one micro-batch, got p={p}, m={m}")
    per_stage = []
    for i in range(p):
        warmup = min(p - i, m)
        ops = [(F, mb) for mb in range(1, warmup + 1)]
        b_next = 1
        for f_next in range(warmup + 1, m + 1):
            ops.append((B, b_next))
            ops.append((F, f_next))
            b_next += 1
        ops.extend((B, mb) for mb in range(b_next, m + 1))
        per_stage.append(ops)
    return per_stage


def simulate(stages: list[StageSpec], micro_batches: int) -> Timeline:
    """Execute the 1F1B schedule and time every event.

    Dependency rules: F(i, mb) waits for stage i-1 to finish computing and
    sending F(i-1, mb); B(i, mb) waits for stage i+1's B(i+1, mb) and its
    send back. Sends occupy the sending stage for its ``send_lat`` (charged
    serially, no overlap). The bubble fraction counts compute time only:
    (p * makespan - total compute) / (p * makespan).
    """
    p = len(stages)
    program = schedule_1f1b(p, micro_batches)

    # splice serial send ops right after the compute op producing their data
    expanded: list[list[tuple[str, int, float]]] = []
    for i, ops in enumerate(program):
        row: list[tuple[str, int, float]] = []
        for kind, mb in ops:
            if kind == F:
                row.append((F, mb, stages[i].t_f))
                if i < p - 1:
                    row.append((SEND_F, mb, stages[i].send_lat))
            else:
                row.append((B, mb, stages[i].t_b))
                if i > 0:
                    row.append((SEND_B, mb, stages[i].send_lat))
        expanded.append(row)

    done: dict[tuple[str, int, int], float] = {}  # (kind, stage, micro) -> end time
    clock = [0.0] * p
    cursor = [0] * p
    events: list[TimelineEvent] = []
    remaining = sum(len(r) for r in expanded)
    while remaining:
        progressed = False
        for i in range(p):
            while cursor[i] < len(expanded[i]):
                kind, mb, dur = expanded[i][cursor[i]]
                if kind == F and i > 0:
                    dep = done.get((SEND_F, i - 1, mb))
                elif kind == B and i < p - 1:
                    dep = done.get((SEND_B, i + 1, mb))
                else:
                    dep = 0.0  # first-stage F, last-stage B and sends obey stage order only
                if dep is None:
                    break
                start = max(clock[i], dep)
                end = start + dur
                clock[i] = end
                done[(kind, i, mb)] = end
                if kind in (F, B) or dur > 0:
                    events.append(TimelineEvent(i, mb, kind, start, end))
                cursor[i] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            raise RuntimeError("pipeline schedule deadlocked; dependency cycle")

    makespan = max(e.end for e in events)
    busy = sum(e.duration for e in events if e.kind in (F, B))
    bubble = (p * makespan - busy) / (p * makespan) if makespan > 0 else 0.0
    return Timeline(
        events=tuple(events),
        makespan=makespan,
        bubble_fraction=bubble,
        num_stages=p,
        num_micro=micro_batches,
    )


def makespan_uniform(p: int, m: int, t_f: float, t_b: float) -> float:
    """Closed form for equal stages and free sends: (m + p - 1) * (t_f + t_b)."""
    return (m + p - 1) * (t_f + t_b)


def bubble_uniform(p: int, m: int) -> float:
    """Closed-form idle share for equal stages: (p - 1) / (m + p - 1)."""
    return (p - 1) / (m + p - 1)


def to_chrome_trace(timeline: Timeline) -> dict:
    """Timeline as a chrome trace object: one process per stage, X events in us."""
    trace = []
    for stage in range(timeline.num_stages):
        trace.append({"name": "process_name", "ph": "M", "pid": stage, "args": {"name": f"stage {stage}"}})
    for ev in timeline.events:
        trace.append(
            {
                "name": f"{ev.kind}{ev.micro}",
                "cat": _CAT[ev.kind],
                "ph": "X",
                "pid": ev.stage,
                "tid": 0,
                "ts": ev.start * 1e6,
                "dur": ev.duration * 1e6,
                "args": {"micro_batch": ev.micro},
            }
        )
    return {"traceEvents": trace, "displayTimeUnit": "ms"}
