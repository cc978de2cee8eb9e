"""Self-contained property suites behind the ``verify`` CLI subcommand.

Each check recomputes its expectation with a small independent oracle (serial
loops, closed forms, hand values) and raises AssertionError on disagreement.
"""

from __future__ import annotations

import numpy as np

from . import costmodel as cm
from . import moe
from . import pipeline as pl
from . import tensor as T
from .collectives import EP, ProcessGroup, World
from .config import PlanConfig, plan_config_from_dict
from .planner import enumerate_configs, find_row


def _ep(n: int) -> ProcessGroup:
    return ProcessGroup(EP, tuple(range(n)))


def check_tensor_values(seed: int) -> None:
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    got = T.matmul(T.tensor(a), T.tensor(b)).data
    assert np.array_equal(got, [[19, 22], [43, 50]]), "matmul hand value"
    rng = T.Rng(seed)
    x, y = rng.normal((6, 4)), rng.normal((4, 3))
    naive = np.array([[sum(x[i, t] * y[t, j] for t in range(4)) for j in range(3)] for i in range(6)])
    assert np.abs(T.matmul(T.tensor(x), T.tensor(y)).data - naive).max() < 1e-12, "matmul oracle"
    assert abs(T.gelu(T.tensor([1.0])).data[0] - 0.841345) < 1e-5, "gelu(1)"
    s = T.softmax(T.tensor([[1.0, 2.0, 3.0]])).data[0]
    assert np.abs(s - [0.09003057, 0.24472847, 0.66524096]).max() < 1e-7, "softmax oracle"


def check_tensor_gradients(seed: int) -> None:
    rng = T.Rng(seed + 1)
    w = rng.normal((5, 5))
    x0 = rng.normal((4, 5))
    x = T.tensor(x0, requires_grad=True)
    loss = T.tsum(T.gelu(T.matmul(x, T.tensor(w))))
    T.backward(loss)
    step = 1e-5
    fd = np.zeros_like(x0)
    for i in range(x0.size):
        xp, xm = x0.ravel().copy(), x0.ravel().copy()
        xp[i] += step
        xm[i] -= step
        lp = T.tsum(T.gelu(T.matmul(T.tensor(xp.reshape(x0.shape)), T.tensor(w)))).item()
        lm = T.tsum(T.gelu(T.matmul(T.tensor(xm.reshape(x0.shape)), T.tensor(w)))).item()
        fd.ravel()[i] = (lp - lm) / (2 * step)
    scale = max(1.0, np.abs(fd).max(), np.abs(x.grad).max())
    assert np.abs(fd - x.grad).max() / scale < 1e-4, "finite differences"


def check_rng_determinism(seed: int) -> None:
    assert np.array_equal(T.Rng(seed, 2).normal((8,)), T.Rng(seed, 2).normal((8,))), "rng repeatability"
    assert not np.array_equal(T.Rng(seed, 0).normal((8,)), T.Rng(seed, 1).normal((8,))), "rng streams"


def check_collectives(seed: int) -> None:
    rng = T.Rng(seed + 2)
    world = World(2, 2)
    vals = [rng.normal((3, 3)) for _ in range(4)]
    out = world.all_reduce_sum(_ep(4), [T.tensor(v) for v in vals])[0].data
    serial = np.zeros((3, 3))
    for v in vals:
        serial = serial + v
    assert np.array_equal(out, serial), "all_reduce vs serial sum"
    splits = [[T.tensor(rng.normal((int(rng.integers(0, 3, 1)[0]), 2))) for _ in range(4)] for _ in range(4)]
    recv = world.all_to_all(_ep(4), splits)
    sent = sorted(tuple(r) for i in range(4) for t in splits[i] for r in t.data)
    got = sorted(tuple(r) for j in range(4) for t in recv[j] for r in t.data)
    assert sent == got, "all_to_all row conservation"


def check_dispatch_example(_: int) -> None:
    plan = moe.build_dispatch_plan([2, 3, 1, 2, 0, 3, 2, 0], 4)
    assert plan.per_expert == [[4, 7], [2], [0, 3, 6], [1, 5]], "worked dispatch example"


def check_architectures_agree(seed: int) -> None:
    for tp in (1, 2, 4):
        for trial in range(10):
            layer = moe.MoeLayerWeights.init(16, 4, T.Rng(seed + 100 * tp + trial))
            hidden = T.Rng(seed + 7000 + 100 * tp + trial).normal((16, 16))
            out_pp, _ = moe.ppmoe_forward(World(1, tp), _ep(tp), T.tensor(hidden), layer.gate, layer.shard(tp))
            [(out_dp, _)] = moe.dpmoe_forward(
                World(1, 1), _ep(1), [T.tensor(hidden)], layer.gate, experts_by_rank=layer.shard(1)
            )
            diff = np.abs(out_pp.data - out_dp.data).max()
            assert diff < 1e-9, f"architecture outputs differ by {diff} at tp={tp}"


def check_span_equivalence(seed: int) -> None:
    layer = moe.MoeLayerWeights.init(8, 4, T.Rng(seed + 3))
    batch = [T.Rng(seed + 4, m).normal((6, 8)) for m in range(4)]
    spatial, temporal = moe.global_batch_equivalence(layer, batch, dp=4, tp=2)
    for name in spatial:
        scale = max(1.0, np.abs(spatial[name]).max(), np.abs(temporal[name]).max())
        rel = np.abs(spatial[name] - temporal[name]).max() / scale
        assert rel < 1e-8, f"{name} differs between spans by {rel}"


def check_combine_parity(seed: int) -> None:
    layer = moe.MoeLayerWeights.init(8, 4, T.Rng(seed + 5))
    hidden = T.Rng(seed + 6).normal((12, 8))
    w1 = World(1, 4)
    moe.ppmoe_forward(w1, _ep(4), T.tensor(hidden), layer.gate, layer.shard(4))
    w2 = World(1, 4)
    moe.dense_tp_ffn_forward(w2, ProcessGroup("TP", (0, 1, 2, 3)), T.tensor(hidden), moe.ExpertFfn.init(8, T.Rng(seed + 7)))
    a = w1.ledger.bytes_for("EP", "all_reduce")
    b = w2.ledger.bytes_for("TP", "all_reduce")
    assert a == b and a > 0, f"combine bytes {a} vs dense ffn bytes {b}"


def check_gating_sync_ratio(seed: int) -> None:
    tokens, micros, experts, tp = 400, 2, 16, 4
    layer = moe.MoeLayerWeights.init(8, experts, T.Rng(seed + 8))
    world = World(1, tp)
    for m in range(micros):
        x = T.tensor(T.Rng(seed + 9, m).normal((tokens, 8)), requires_grad=True)
        out, l_aux = moe.ppmoe_forward(world, _ep(tp), x, layer.gate, layer.shard(tp))
        T.backward(T.add(T.tsum(out), l_aux))
    moe.sync_gate_gradients(world, _ep(tp), layer.gate)
    ratio = world.ledger.bytes_for("EP", "gradient_sync") / world.ledger.bytes_for("EP", "all_reduce")
    assert abs(ratio - experts / (2 * tokens * micros)) < 1e-12, f"sync ratio {ratio}"


def check_pipeline(seed: int) -> None:
    timeline = pl.simulate(pl.uniform_stages(4, 1.0, 1.0), 8)
    assert timeline.makespan == 22.0, "uniform 4x8 makespan"
    assert timeline.bubble_fraction == 3 / 11, "uniform 4x8 bubble"
    rng = np.random.default_rng(seed + 10)
    for _ in range(20):
        p, m = int(rng.integers(1, 6)), int(rng.integers(1, 10))
        tf, tb = float(rng.uniform(0.2, 2.0)), float(rng.uniform(0.2, 2.0))
        tl = pl.simulate(pl.uniform_stages(p, tf, tb), m)
        assert abs(tl.makespan - pl.makespan_uniform(p, m, tf, tb)) < 1e-9, "closed-form makespan"
        per_stage = m * (tf + tb)
        for i in range(p):
            busy = sum(e.duration for e in tl.stage_events(i))
            assert abs(busy - per_stage) < 1e-9, "work conservation"


def check_latency_fixtures(_: int) -> None:
    assert abs(cm.ratio_allreduce_cal(8, 125e12, 300e9, 1e3) - 35 / 6) < 1e-12, "all-reduce/compute ratio"
    assert cm.ratio_a2a_ffn_bound(64) == 252.0, "dispatch ratio bound"
    assert cm.ratio_a2a_ffn(64, 125e12, 12.5e9, 1e4) >= 252.0, "dispatch ratio vs bound"
    assert abs(cm.lat_all_to_all(64, 2.0 * 2048 * 4096 / 64, 12.5e9) - 0.042278) < 1e-5, "a2a fixture"
    assert abs(cm.lat_all_reduce(8, 2.0 * 2048 * 1000, 300e9) - 1.9115e-4) < 1e-8, "all-reduce fixture"


def check_breakdown_fixtures(_: int) -> None:
    rep = cm.breakdown_report(
        total=7617,
        components=[
            ("moe forward", 6294, False),
            ("first all-to-all", 2566, True),
            ("second all-to-all", 2423, True),
            ("gating", 156, True),
            ("others", 1323, False),
        ],
        moe_total=6294,
        combined=[("all-to-all combined", ["first all-to-all", "second all-to-all"])],
    )
    for name, pct in (("moe forward", 82.6), ("first all-to-all", 33.7), ("second all-to-all", 31.8), ("gating", 2.1)):
        assert abs(rep.row(name).pct_total - pct) <= 0.1, f"{name} share"
    assert abs(rep.row("all-to-all combined").pct_total - 65.5) <= 0.1, "combined a2a of total"
    assert 79.1 <= rep.row("all-to-all combined").pct_moe <= 79.4, "combined a2a of moe"
    rep2 = cm.breakdown_report(
        total=6257,
        components=[
            ("moe forward", 2393, False),
            ("gating", 491, True),
            ("expert compute", 437, True),
            ("moe all-reduce", 1294, True),
            ("ffn forward", 1714, False),
            ("ffn all-reduce", 1176, False),
        ],
        moe_total=2393,
    )
    for name, pct in (
        ("moe forward", 38.2),
        ("gating", 7.8),
        ("expert compute", 7.0),
        ("moe all-reduce", 20.7),
        ("ffn forward", 27.4),
        ("ffn all-reduce", 18.8),
    ):
        assert abs(rep2.row(name).pct_total - pct) <= 0.1, f"{name} share"


def check_parameter_scales(_: int) -> None:
    for shape, target in (
        (cm.ModelShape(24, 1024, 16, 2048, 50257, 1, experts=1), 350e6),
        (cm.ModelShape(24, 1024, 16, 2048, 50257, 1, experts=64), 6.7e9),
        (cm.ModelShape(32, 4096, 32, 2048, 50257, 1, experts=64), 143e9),
    ):
        total = cm.param_count(shape).total
        assert abs(total - target) / target < 0.05, f"{target:g} parameters, got {total:g}"


def check_memory_feasibility(_: int) -> None:
    shape = cm.ModelShape(32, 4096, 32, 2048, 50257, 1, experts=64)
    prof = cm.ClusterProfile(125e12, 300e9, 12.5e9, 0.0, 16, 8, 32e9)
    ok = cm.memory_per_device(shape, cm.ParallelDegrees(1, 8, 16, cm.PPMOE), prof)
    assert ok.feasible and 18e9 < ok.bytes_per_device < 22e9, "slice-architecture fit"
    for zero in (False, True):
        bad = cm.memory_per_device(shape, cm.ParallelDegrees(128, 1, 1, cm.DPMOE), prof, zero_enabled=zero)
        assert not bad.feasible, "dispatch architecture without tensor groups must not fit"


def _plan_config(layers: int, hidden: int, heads: int, nodes: int) -> PlanConfig:
    return plan_config_from_dict(
        {
            "model": {
                "layers": layers,
                "hidden": hidden,
                "heads": heads,
                "seq_len": 2048,
                "vocab": 50257,
                "micro_batch": 1,
                "experts": 64,
                "moe_every": 2,
            },
            "cluster": {
                "flops_per_device": 125e12,
                "intra_node_bw": 300e9,
                "inter_node_bw": 12.5e9,
                "startup_latency": 0.0,
                "nodes": nodes,
                "devices_per_node": 8,
                "mem_per_device": 32e9,
            },
            "constraints": {"micro_batches": 32, "tensor_degrees": [1, 2, 4, 8]},
        }
    )


def check_layout_ordering(_: int) -> None:
    small = enumerate_configs(_plan_config(24, 1024, 16, nodes=4))
    pp = find_row(small, "ppmoe", 1, 8, 4)
    dp = find_row(small, "dpmoe", 4, 8, 1)
    assert pp.throughput > dp.throughput, "small-setting ordering"
    large128 = enumerate_configs(_plan_config(32, 4096, 32, nodes=16))
    large256 = enumerate_configs(_plan_config(32, 4096, 32, nodes=32))
    pp_large = find_row(large128, "ppmoe", 1, 8, 16)
    dp_large = find_row(large256, "dpmoe", 32, 8, 1)
    assert pp_large.throughput > dp_large.throughput, "large-setting ordering"


CHECKS = [
    ("tensor op values", check_tensor_values),
    ("tensor gradients vs finite differences", check_tensor_gradients),
    ("rng determinism", check_rng_determinism),
    ("collective conservation", check_collectives),
    ("dispatch worked example", check_dispatch_example),
    ("architectures agree (index-slice vs all-to-all)", check_architectures_agree),
    ("spatial vs temporal gradient spans", check_span_equivalence),
    ("combine / dense-ffn byte parity", check_combine_parity),
    ("gating gradient sync ratio", check_gating_sync_ratio),
    ("pipeline closed forms and conservation", check_pipeline),
    ("latency formula fixtures", check_latency_fixtures),
    ("breakdown percentage fixtures", check_breakdown_fixtures),
    ("parameter count scales", check_parameter_scales),
    ("memory feasibility pair", check_memory_feasibility),
    ("layout throughput ordering", check_layout_ordering),
]


def run_verification(seed: int = 0, emit=print) -> int:
    """Run every check; print one line each plus a summary. Returns failure count."""
    failures = 0
    for name, fn in CHECKS:
        try:
            fn(seed)
        except AssertionError as err:
            failures += 1
            emit(f"FAIL {name}: {err}")
        else:
            emit(f"PASS {name}")
    emit(f"{len(CHECKS) - failures} passed, {failures} failed (seed {seed})")
    return failures
