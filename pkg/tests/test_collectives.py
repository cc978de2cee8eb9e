"""Collectives: sum/transpose semantics, ledger accounting, group construction."""

import json
from dataclasses import dataclass

import numpy as np
import pytest

from moesim import tensor as T
from moesim.collectives import ConfigurationError, ProcessGroup, World, build_groups


@dataclass
class Degrees:
    dp: int
    tp: int
    pp: int
    mode: str


def group(kind, members):
    return ProcessGroup(kind, tuple(members))


# ---------------------------------------------------------------- all_reduce


def test_all_reduce_two_ranks():
    w = World(1, 2)
    out = w.all_reduce_sum(group("TP", [0, 1]), [T.tensor([1.0, 2.0]), T.tensor([3.0, 4.0])])
    assert len(out) == 2
    for t in out:
        assert np.array_equal(t.data, [4.0, 6.0])


def test_all_reduce_single_member_identity_zero_bytes():
    w = World(1, 2)
    x = T.tensor([5.0, 5.0])
    out = w.all_reduce_sum(group("TP", [0]), [x])
    assert np.array_equal(out[0].data, x.data)
    assert w.ledger.bytes_for("TP", "all_reduce") == 0.0
    assert w.ledger.count_for("TP", "all_reduce") == 1


def test_all_reduce_vs_serial_oracle():
    w = World(1, 4)
    rng = T.Rng(40)
    vals = [rng.integers(-5, 6, 12).astype(float).reshape(3, 4) for _ in range(4)]
    out = w.all_reduce_sum(group("TP", [0, 1, 2, 3]), [T.tensor(v) for v in vals])
    oracle = np.zeros((3, 4))
    for v in vals:
        oracle = oracle + v
    assert np.array_equal(out[0].data, oracle)


def test_all_reduce_ledger_ring_bytes():
    w = World(1, 4, elem_bytes=2.0)
    g = group("TP", [0, 1, 2, 3])
    w.all_reduce_sum(g, [T.tensor(np.zeros(10)) for _ in range(4)])
    # 2*(N-1)*m with m = 10 elements * 2 bytes
    assert w.ledger.bytes_for("TP", "all_reduce") == 2 * 3 * 20
    assert w.ledger.inter_node_bytes_for("TP", "all_reduce") == 0.0


def test_all_reduce_inter_node_share():
    w = World(2, 2, elem_bytes=2.0)
    g = group("DP", [0, 1, 2, 3])  # ranks 0,1 node 0; 2,3 node 1
    w.all_reduce_sum(g, [T.tensor(np.zeros(8)) for _ in range(4)])
    total = 2 * 3 * 16
    # ring 0-1-2-3-0 crosses nodes twice out of four edges
    assert w.ledger.bytes_for("DP", "all_reduce") == total
    assert w.ledger.inter_node_bytes_for("DP", "all_reduce") == total / 2


def test_all_reduce_shape_mismatch_names_ranks():
    w = World(1, 2)
    with pytest.raises(ValueError, match="rank 1"):
        w.all_reduce_sum(group("TP", [0, 1]), [T.tensor([1.0]), T.tensor([1.0, 2.0])])


def test_all_reduce_bit_identical_across_runs():
    def run():
        w = World(1, 4)
        rng = T.Rng(88)
        ts = [T.tensor(rng.normal((5, 5))) for _ in range(4)]
        return w.all_reduce_sum(group("TP", [0, 1, 2, 3]), ts)[0].data

    assert np.array_equal(run(), run())


def test_all_reduce_backward_identity_to_each_rank():
    w = World(1, 2)
    a = T.tensor([[1.0, 2.0]], requires_grad=True)
    b = T.tensor([[3.0, 4.0]], requires_grad=True)
    out = w.all_reduce_sum(group("TP", [0, 1]), [a, b])
    T.backward(T.tsum(out[0]))
    assert np.array_equal(a.grad, np.ones((1, 2)))
    assert np.array_equal(b.grad, np.ones((1, 2)))


# ---------------------------------------------------------------- all_to_all


def test_all_to_all_two_rank_transpose():
    w = World(1, 2)
    a0, a1 = T.tensor([[0.0]]), T.tensor([[1.0]])
    b0, b1 = T.tensor([[10.0]]), T.tensor([[11.0]])
    recv = w.all_to_all(group("EP", [0, 1]), [[a0, a1], [b0, b1]])
    assert recv[0] == [a0, b0]
    assert recv[1] == [a1, b1]


def test_all_to_all_self_only_zero_bytes():
    w = World(1, 2)
    empty = T.tensor(np.zeros((0, 3)))
    full = T.tensor(np.ones((2, 3)))
    w.all_to_all(group("EP", [0, 1]), [[full, empty], [empty, full]])
    assert w.ledger.bytes_for("EP", "all_to_all") == 0.0
    assert w.ledger.count_for("EP", "all_to_all") == 1


def test_all_to_all_multiset_preserved():
    w = World(2, 2)
    rng = T.Rng(41)
    splits = [[T.tensor(rng.normal((int(rng.integers(0, 4, 1)[0]), 3))) for _ in range(4)] for _ in range(4)]
    recv = w.all_to_all(group("EP", [0, 1, 2, 3]), splits)
    sent_rows = sorted(tuple(row) for i in range(4) for t in splits[i] for row in t.data)
    got_rows = sorted(tuple(row) for j in range(4) for t in recv[j] for row in t.data)
    assert sent_rows == got_rows


def test_all_to_all_off_diagonal_bytes_and_inter_node():
    w = World(2, 1, elem_bytes=2.0)
    g = group("EP", [0, 1])
    x = T.tensor(np.ones((2, 2)))
    w.all_to_all(g, [[x, x], [x, x]])
    assert w.ledger.bytes_for("EP", "all_to_all") == 2 * 4 * 2.0
    assert w.ledger.inter_node_bytes_for("EP", "all_to_all") == 2 * 4 * 2.0


def test_all_to_all_missing_split_error():
    w = World(1, 2)
    x = T.tensor(np.ones((1, 1)))
    with pytest.raises(ValueError, match="missing"):
        w.all_to_all(group("EP", [0, 1]), [[x], [x, x]])


# ---------------------------------------------------------------- p2p


def test_send_recv_identity():
    w = World(1, 2)
    x = T.tensor(np.arange(6.0).reshape(2, 3))
    y = w.send_recv(0, 1, x)
    assert y is x


def test_send_recv_fifo_order():
    w = World(1, 2)
    a, b = T.tensor([1.0]), T.tensor([2.0])
    w.send(0, 1, a)
    w.send(0, 1, b)
    assert w.recv(0, 1) is a
    assert w.recv(0, 1) is b


def test_send_self_error():
    w = World(1, 2)
    with pytest.raises(ValueError, match="src and dst"):
        w.send(1, 1, T.tensor([0.0]))


def test_send_cross_node_inter_flag():
    w = World(2, 2, elem_bytes=2.0)
    w.send_recv(0, 1, T.tensor(np.zeros(4)))
    assert w.ledger.inter_node_bytes_for("P2P", "send") == 0.0
    w.send_recv(0, 2, T.tensor(np.zeros(4)))
    assert w.ledger.inter_node_bytes_for("P2P", "send") == 8.0


# ---------------------------------------------------------------- groups


def test_build_groups_ppmoe_table_layout():
    w = World(4, 8)
    gs = build_groups(w, Degrees(1, 8, 4, "ppmoe"), num_experts=64)
    assert len(gs.tp) == 4
    for g in gs.tp:
        assert g.size == 8
        assert len({w.node_of(r) for r in g.members}) == 1
    assert len(gs.ep) == 4
    assert gs.ep[0].members == gs.tp[0].members
    # 64 experts over tp=8 means 8 local experts per rank
    assert 64 // 8 == 8
    assert len(gs.pp) == 8
    for g in gs.pp:
        assert g.size == 4


def test_build_groups_dpmoe_ep_aliases_dp():
    w = World(1, 8)
    gs = build_groups(w, Degrees(8, 1, 1, "dpmoe"), num_experts=8)
    assert len(gs.ep) == 1
    assert gs.ep[0].members == tuple(range(8))
    assert gs.ep[0].kind == "EP"
    assert gs.dp[0].members == tuple(range(8))


def test_build_groups_ppmoe_bad_tp_divisor():
    w = World(4, 8)
    with pytest.raises(ConfigurationError, match="8 devices/node not divisible by tp=3"):
        build_groups(w, Degrees(1, 3, 4, "ppmoe"), num_experts=64)


def test_build_groups_world_size_mismatch():
    w = World(4, 8)
    with pytest.raises(ConfigurationError, match="world size 32"):
        build_groups(w, Degrees(2, 8, 4, "ppmoe"), num_experts=64)


def test_build_groups_expert_divisibility():
    w = World(4, 8)
    with pytest.raises(ConfigurationError, match="experts divisible by tp"):
        build_groups(w, Degrees(1, 8, 4, "ppmoe"), num_experts=60)
    with pytest.raises(ConfigurationError, match="experts divisible by dp"):
        build_groups(w, Degrees(32, 1, 1, "dpmoe"), num_experts=60)


def test_groups_partition_world():
    w = World(2, 8)
    gs = build_groups(w, Degrees(2, 4, 2, "ppmoe"), num_experts=8)
    for kind_groups in (gs.dp, gs.tp, gs.pp):
        seen = sorted(r for g in kind_groups for r in g.members)
        assert seen == list(range(16))


def test_group_of_lookup():
    w = World(2, 8)
    gs = build_groups(w, Degrees(2, 4, 2, "ppmoe"), num_experts=8)
    for rank in range(16):
        assert rank in gs.group_of("TP", rank).members
        assert rank in gs.group_of("EP", rank).members


# ---------------------------------------------------------------- tp_region


def test_tp_region_forward_identity_and_backward_sum():
    w = World(1, 4)
    g = group("EP", [0, 1, 2, 3])
    x = T.tensor(np.ones((2, 2)), requires_grad=True)
    reps = w.tp_region(g, x)
    assert len(reps) == 4
    for r in reps:
        assert np.array_equal(r.data, x.data)
    # each rank scales its replica differently; grads must sum
    loss = T.tsum(T.concat_rows([T.smul(rep, float(i + 1)) for i, rep in enumerate(reps)]))
    T.backward(loss)
    assert np.array_equal(x.grad, np.full((2, 2), 1.0 + 2.0 + 3.0 + 4.0))
    assert w.ledger.count_for("EP", "all_reduce") == 1
    assert w.ledger.bytes_for("EP", "all_reduce") == 2 * 3 * (4 * 2.0)


def test_ledger_json_dump_shape():
    w = World(1, 2)
    w.all_reduce_sum(group("TP", [0, 1]), [T.tensor([1.0]), T.tensor([2.0])])
    blob = json.loads(w.ledger.to_json())
    assert blob["TP"]["all_reduce"]["count"] == 1
    assert set(blob["TP"]["all_reduce"]) == {"bytes", "count", "inter_node_bytes"}


def test_ledger_monotone_non_negative():
    w = World(1, 2)
    g = group("TP", [0, 1])
    last = 0.0
    for _ in range(5):
        w.all_reduce_sum(g, [T.tensor(np.zeros(3)), T.tensor(np.zeros(3))])
        cur = w.ledger.bytes_for("TP", "all_reduce")
        assert cur >= last
        last = cur
