"""Pipeline schedule and simulator, checked by an independent dependency replayer."""

import numpy as np
import pytest

from moesim import pipeline as pl


# ------------------------------------------------------------------ oracle


def replay_oracle(stages, m):
    """Greedy one-op-at-a-time replay of the dependency rules.

    Independent of the simulator's stage-sweep mechanics: at every step it
    schedules exactly the single ready op with the earliest possible start
    (ties to the lowest stage). Returns {(kind, stage, micro): (start, end)}.
    """
    p = len(stages)
    rows = []
    for i, ops in enumerate(pl.schedule_1f1b(p, m)):
        row = []
        for kind, mb in ops:
            if kind == "F":
                row.append(("F", mb, stages[i].t_f))
                if i < p - 1:
                    row.append(("SendF", mb, stages[i].send_lat))
            else:
                row.append(("B", mb, stages[i].t_b))
                if i > 0:
                    row.append(("SendB", mb, stages[i].send_lat))
        rows.append(row)

    done = {}
    clock = [0.0] * p
    cursor = [0] * p
    total = sum(len(r) for r in rows)
    scheduled = 0
    while scheduled < total:
        best = None
        for i in range(p):
            if cursor[i] >= len(rows[i]):
                continue
            kind, mb, dur = rows[i][cursor[i]]
            if kind == "F" and i > 0:
                dep = done.get(("SendF", i - 1, mb))
            elif kind == "B" and i < p - 1:
                dep = done.get(("SendB", i + 1, mb))
            else:
                dep = 0.0
            if dep is None:
                continue
            start = max(clock[i], dep)
            if best is None or (start, i) < best[:2]:
                best = (start, i, kind, mb, dur)
        assert best is not None, "oracle deadlock"
        start, i, kind, mb, dur = best
        done[(kind, i, mb)] = start + dur
        clock[i] = start + dur
        cursor[i] += 1
        scheduled += 1
    return done


def check_timeline(timeline, stages):
    """Assert every documented invariant of a simulated timeline."""
    p, m = timeline.num_stages, timeline.num_micro
    program = pl.schedule_1f1b(p, m)
    for i in range(p):
        evs = timeline.stage_events(i, ("F", "B", "SendF", "SendB"))
        for prev, nxt in zip(evs, evs[1:]):
            assert nxt.start >= prev.end  # one compute/send at a time per stage
        compute = timeline.stage_events(i)
        assert [(e.kind, e.micro) for e in compute] == program[i]  # program order, 1F1B alternation
        assert sum(1 for e in compute if e.kind == "F") == m
        assert sum(1 for e in compute if e.kind == "B") == m
        busy = sum(e.duration for e in compute)
        assert abs(busy - m * (stages[i].t_f + stages[i].t_b)) < 1e-12  # work conservation

    ends = {(e.kind, e.stage, e.micro): e.end for e in timeline.events}
    starts = {(e.kind, e.stage, e.micro): e.start for e in timeline.events}
    for mb in range(1, m + 1):
        for i in range(1, p):
            assert starts[("F", i, mb)] >= ends[("F", i - 1, mb)] + stages[i - 1].send_lat
        for i in range(p - 1):
            assert starts[("B", i, mb)] >= ends[("B", i + 1, mb)] + stages[i + 1].send_lat
        if p > 0:
            assert starts[("B", p - 1, mb)] >= ends[("F", p - 1, mb)]
    assert timeline.makespan == max(e.end for e in timeline.events)


def assert_matches_oracle(stages, m):
    timeline = pl.simulate(stages, m)
    oracle_ends = replay_oracle(stages, m)
    sim_ends = {(e.kind, e.stage, e.micro): e.end for e in timeline.events if e.kind in ("F", "B")}
    for key, end in sim_ends.items():
        assert end == oracle_ends[key], f"{key}: simulator {end} vs oracle {oracle_ends[key]}"
    check_timeline(timeline, stages)
    return timeline


# ------------------------------------------------------------------ schedule


def test_schedule_warmup_counts():
    sched = pl.schedule_1f1b(4, 8)
    kinds0 = [k for k, _ in sched[0]]
    assert kinds0[:4] == ["F", "F", "F", "F"]
    assert kinds0[4] == "B"  # four warmup forwards before stage 0's first backward
    for i, ops in enumerate(sched):
        warmup = min(4 - i, 8)
        assert [k for k, _ in ops[:warmup]] == ["F"] * warmup
        assert sum(1 for k, _ in ops if k == "F") == 8
        assert sum(1 for k, _ in ops if k == "B") == 8


def test_schedule_single_stage_alternates():
    sched = pl.schedule_1f1b(1, 4)
    assert sched[0] == [("F", 1), ("B", 1), ("F", 2), ("B", 2), ("F", 3), ("B", 3), ("F", 4), ("B", 4)]


def test_schedule_single_micro_batch():
    sched = pl.schedule_1f1b(3, 1)
    for ops in sched:
        assert ops == [("F", 1), ("B", 1)]


def test_schedule_rejects_empty():
    with pytest.raises(ValueError):
        pl.schedule_1f1b(0, 4)
    with pytest.raises(ValueError):
        pl.schedule_1f1b(4, 0)


# ------------------------------------------------------------------ simulate


def test_uniform_4x8_closed_form():
    timeline = assert_matches_oracle(pl.uniform_stages(4, 1.0, 1.0), 8)
    assert timeline.makespan == 22.0
    assert timeline.bubble_fraction == 3 / 11
    assert timeline.makespan == pl.makespan_uniform(4, 8, 1.0, 1.0)
    assert timeline.bubble_fraction == pl.bubble_uniform(4, 8)


def test_single_stage_no_bubble():
    timeline = assert_matches_oracle(pl.uniform_stages(1, 1.0, 2.0), 5)
    assert timeline.makespan == 15.0
    assert timeline.bubble_fraction == 0.0


def test_single_micro_batch_sequential():
    timeline = assert_matches_oracle(pl.uniform_stages(4, 1.0, 1.0), 1)
    assert timeline.makespan == 8.0
    assert timeline.bubble_fraction == 3 / 4


def test_uniform_matches_closed_form_across_grid():
    for p in (1, 2, 3, 5, 8):
        for m in (1, 2, 4, 9):
            timeline = pl.simulate(pl.uniform_stages(p, 0.7, 1.3), m)
            assert abs(timeline.makespan - pl.makespan_uniform(p, m, 0.7, 1.3)) < 1e-9
            assert abs(timeline.bubble_fraction - pl.bubble_uniform(p, m)) < 1e-12


def test_bubble_strictly_decreases_with_micro_batches():
    previous = 1.0
    for m in (1, 2, 4, 8, 16, 32):
        timeline = pl.simulate(pl.uniform_stages(4, 1.0, 1.0), m)
        assert timeline.bubble_fraction < previous
        previous = timeline.bubble_fraction


def test_serial_send_latency_charged():
    stages = pl.uniform_stages(2, 1.0, 1.0, send_lat=0.5)
    timeline = assert_matches_oracle(stages, 1)
    ends = {(e.kind, e.stage): (e.start, e.end) for e in timeline.events}
    assert ends[("F", 0)] == (0.0, 1.0)
    assert ends[("SendF", 0)] == (1.0, 1.5)
    assert ends[("F", 1)] == (1.5, 2.5)
    assert ends[("B", 1)] == (2.5, 3.5)
    assert ends[("SendB", 1)] == (3.5, 4.0)
    assert ends[("B", 0)] == (4.0, 5.0)
    assert timeline.makespan == 5.0


def test_zero_length_sends_not_emitted():
    timeline = pl.simulate(pl.uniform_stages(3, 1.0, 1.0), 2)
    assert all(e.kind in ("F", "B") for e in timeline.events)


def test_randomized_instances_pass_replayer():
    rng = np.random.default_rng(123)
    for _ in range(40):
        p = int(rng.integers(1, 7))
        m = int(rng.integers(1, 13))
        stages = [
            pl.StageSpec(
                i,
                float(rng.uniform(0.1, 3.0)),
                float(rng.uniform(0.1, 3.0)),
                float(rng.choice([0.0, rng.uniform(0.0, 1.0)])),
            )
            for i in range(p)
        ]
        assert_matches_oracle(stages, m)


# ------------------------------------------------------------------ trace


def test_chrome_trace_structure():
    timeline = pl.simulate(pl.uniform_stages(3, 1.0, 2.0), 2)
    trace = pl.to_chrome_trace(timeline)
    assert set(trace) == {"traceEvents", "displayTimeUnit"}
    meta = [e for e in trace["traceEvents"] if e["ph"] == "M"]
    assert {m["pid"] for m in meta} == {0, 1, 2}
    xs = [e for e in trace["traceEvents"] if e["ph"] == "X"]
    assert len(xs) == 3 * 2 * 2  # stages * micro * (F+B)
    for ev in xs:
        assert ev["ts"] >= 0 and ev["dur"] > 0
        assert ev["cat"] in ("forward", "backward", "comm")
        assert ev["args"]["micro_batch"] in (1, 2)
