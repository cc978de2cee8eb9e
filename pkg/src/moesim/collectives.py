"""Simulated multi-rank world: groups, deterministic collectives, traffic ledger.

Ranks are logical; a collective call is the rendezvous at which every member's
input is presented at once, so results never depend on scheduling. Reductions
always sum in ascending-rank order, which makes them bit-identical run to run.
Every operation credits a traffic ledger with the bytes a ring implementation
would move, split into intra- and inter-node shares.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, add

DP, TP, PP, EP = "DP", "TP", "PP", "EP"
P2P = "P2P"


class ConfigurationError(ValueError):
    """A parallel layout violates a divisibility or placement constraint."""


@dataclass(frozen=True)
class ProcessGroup:
    """Ordered set of ranks participating in one flavor of parallelism."""

    kind: str
    members: tuple[int, ...]

    def __post_init__(self):
        if len(set(self.members)) != len(self.members):
            raise ConfigurationError(f"{self.kind} group has repeated ranks: {self.members}")
        if list(self.members) != sorted(self.members):
            raise ConfigurationError(f"{self.kind} group members must be sorted: {self.members}")

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass
class TrafficLedger:
    """Cumulative bytes and op counts per (group kind, op kind)."""

    elem_bytes: float = 2.0
    entries: dict[tuple[str, str], dict[str, float]] = field(default_factory=dict)

    def charge(self, group_kind: str, op_kind: str, bytes_moved: float, inter_node_bytes: float = 0.0) -> None:
        if bytes_moved < 0 or inter_node_bytes < 0:
            raise ValueError("ledger bytes must be non-negative")
        cell = self.entries.setdefault((group_kind, op_kind), {"bytes": 0.0, "count": 0, "inter_node_bytes": 0.0})
        cell["bytes"] += bytes_moved
        cell["count"] += 1
        cell["inter_node_bytes"] += inter_node_bytes

    def bytes_for(self, group_kind: str, op_kind: str) -> float:
        return self.entries.get((group_kind, op_kind), {}).get("bytes", 0.0)

    def count_for(self, group_kind: str, op_kind: str) -> int:
        return int(self.entries.get((group_kind, op_kind), {}).get("count", 0))

    def inter_node_bytes_for(self, group_kind: str, op_kind: str) -> float:
        return self.entries.get((group_kind, op_kind), {}).get("inter_node_bytes", 0.0)

    def as_dict(self) -> dict:
        out: dict[str, dict[str, dict[str, float]]] = {}
        for (gk, ok), cell in sorted(self.entries.items()):
            out.setdefault(gk, {})[ok] = dict(cell)
        return out

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.as_dict(), indent=indent, sort_keys=True)


class World:
    """Simulated rank universe: nodes x devices-per-node, channels, ledger."""

    def __init__(self, nodes: int, devices_per_node: int, elem_bytes: float = 2.0):
        if nodes < 1 or devices_per_node < 1:
            raise ConfigurationError(f"need at least one node and one device, got {nodes}x{devices_per_node}")
        self.nodes = nodes
        self.devices_per_node = devices_per_node
        self.world_size = nodes * devices_per_node
        self.ledger = TrafficLedger(elem_bytes)
        self._channels: dict[tuple[int, int], deque[Tensor]] = {}

    def node_of(self, rank: int) -> int:
        self._check_rank(rank)
        return rank // self.devices_per_node

    def local_id_of(self, rank: int) -> int:
        self._check_rank(rank)
        return rank % self.devices_per_node

    def _check_rank(self, rank: int) -> None:
        if not 0 <= rank < self.world_size:
            raise ValueError(f"rank {rank} outside world of size {self.world_size}")

    # ------------------------------------------------------------ ledger math

    def _ring_crossings(self, members: tuple[int, ...]) -> int:
        n = len(members)
        if n < 2:
            return 0
        return sum(1 for i in range(n) if self.node_of(members[i]) != self.node_of(members[(i + 1) % n]))

    def _ring_bytes(self, group: ProcessGroup, numel: int) -> tuple[float, float]:
        n = group.size
        m = numel * self.ledger.elem_bytes
        total = 2 * (n - 1) * m
        per_edge = total / n if n > 1 else 0.0
        return total, per_edge * self._ring_crossings(group.members)

    def _charge_all_reduce(self, group: ProcessGroup, numel: int) -> None:
        total, inter = self._ring_bytes(group, numel)
        self.ledger.charge(group.kind, "all_reduce", total, inter)

    def account_gradient_sync(self, group: ProcessGroup, numel: int) -> None:
        """Ledger-only record of a deferred parameter-gradient all-reduce.

        Replicated parameters in this simulator share storage, so their
        gradients are already reconciled by accumulation; the bytes the sync
        would move are still charged, under op kind ``gradient_sync``.
        """
        total, inter = self._ring_bytes(group, numel)
        self.ledger.charge(group.kind, "gradient_sync", total, inter)

    # ------------------------------------------------------------ collectives

    def all_reduce_sum(self, group: ProcessGroup, per_rank: list[Tensor]) -> list[Tensor]:
        """Elementwise sum across the group; every member receives the result.

        Summation runs in ascending-rank order. Ring accounting: 2*(N-1)*m
        bytes total for per-rank payload m.
        """
        if len(per_rank) != group.size:
            raise ValueError(f"all_reduce_sum needs one tensor per member, got {len(per_rank)} for {group.size}")
        shape = per_rank[0].shape
        for rank, t in zip(group.members, per_rank):
            if t.shape != shape:
                raise ValueError(
                    f"all_reduce_sum shape mismatch: rank {group.members[0]} has {shape}, rank {rank} has {t.shape}"
                )
        acc = per_rank[0]
        for t in per_rank[1:]:
            acc = add(acc, t)
        self._charge_all_reduce(group, acc.numel)
        return [acc for _ in group.members]

    def all_to_all(self, group: ProcessGroup, per_rank_splits: list[list[Tensor]]) -> list[list[Tensor]]:
        """Transpose of data across ranks: received[j][i] = sent[i][j].

        The global multiset of rows is preserved exactly; only off-diagonal
        splits are charged.
        """
        n = group.size
        if len(per_rank_splits) != n:
            raise ValueError(f"all_to_all needs splits from each of {n} ranks, got {len(per_rank_splits)}")
        for i, splits in enumerate(per_rank_splits):
            if len(splits) != n:
                raise ValueError(f"all_to_all: rank {group.members[i]} is missing splits ({len(splits)} of {n})")
        for j in range(n):
            tails = {per_rank_splits[i][j].shape[1:] for i in range(n)}
            if len(tails) > 1:
                raise ValueError(f"all_to_all: splits for rank {group.members[j]} not concatenable: {sorted(tails)}")
        bytes_moved = 0.0
        inter = 0.0
        for i in range(n):
            for j in range(n):
                if i == j:
                    continue
                b = per_rank_splits[i][j].numel * self.ledger.elem_bytes
                bytes_moved += b
                if self.node_of(group.members[i]) != self.node_of(group.members[j]):
                    inter += b
        self.ledger.charge(group.kind, "all_to_all", bytes_moved, inter)
        return [[per_rank_splits[i][j] for i in range(n)] for j in range(n)]

    def send(self, src: int, dst: int, t: Tensor) -> None:
        """Enqueue a point-to-point message; per-channel order is FIFO."""
        if src == dst:
            raise ValueError(f"send: src and dst are both rank {src}")
        self._check_rank(src)
        self._check_rank(dst)
        m = t.numel * self.ledger.elem_bytes
        inter = m if self.node_of(src) != self.node_of(dst) else 0.0
        self.ledger.charge(P2P, "send", m, inter)
        self._channels.setdefault((src, dst), deque()).append(t)

    def recv(self, src: int, dst: int) -> Tensor:
        chan = self._channels.get((src, dst))
        if not chan:
            raise ValueError(f"recv: no pending message on channel {src} -> {dst}")
        return chan.popleft()

    def send_recv(self, src: int, dst: int, t: Tensor) -> Tensor:
        self.send(src, dst, t)
        return self.recv(src, dst)

    def tp_region(self, group: ProcessGroup, x: Tensor, charge: bool = True) -> list[Tensor]:
        """Per-rank views of a replicated tensor entering a tensor-parallel region.

        Forward is the identity on every rank. On backward, each rank deposits
        its partial input gradient and the region accounts for the one
        all-reduce that reconciles them; the accumulated gradient on ``x`` is
        the reconciled sum. Intended for exactly one backward pass per region.
        """
        state = {"charged": False}

        def make_backward(rank_slot: int):
            def backward_fn(g: np.ndarray) -> None:
                if charge and not state["charged"]:
                    state["charged"] = True
                    self._charge_all_reduce(group, x.numel)
                if x.requires_grad:
                    x.accumulate_grad(g)

            return backward_fn

        return [
            Tensor(x.data, x.requires_grad, (x,), make_backward(r), "tp_replica")
            for r in range(group.size)
        ]


@dataclass(frozen=True)
class GroupSet:
    """All process groups of one layout, indexed by kind."""

    dp: tuple[ProcessGroup, ...]
    tp: tuple[ProcessGroup, ...]
    pp: tuple[ProcessGroup, ...]
    ep: tuple[ProcessGroup, ...]

    def group_of(self, kind: str, rank: int) -> ProcessGroup:
        for g in getattr(self, kind.lower()):
            if rank in g.members:
                return g
        raise ValueError(f"rank {rank} not in any {kind} group")


def build_groups(world: World, degrees, num_experts: int) -> GroupSet:
    """Partition the world into DP/TP/PP groups and alias the EP groups.

    Rank layout: rank = (p * D + d) * T + t, so tensor groups are contiguous.
    Expert groups ride on the tensor dimension in ppmoe mode and on the data
    dimension in dpmoe mode.
    """
    d_deg, t_deg, p_deg = degrees.dp, degrees.tp, degrees.pp
    mode = degrees.mode
    if mode == "ppmoe":
        if world.devices_per_node % t_deg != 0:
            raise ConfigurationError(
                f"ppmoe tensor groups must sit inside one node: {world.devices_per_node} devices/node not divisible by tp={t_deg}"
            )
        if num_experts % t_deg != 0:
            raise ConfigurationError(f"ppmoe needs experts divisible by tp: {num_experts} % {t_deg} != 0")
    elif mode == "dpmoe":
        if num_experts % d_deg != 0:
            raise ConfigurationError(f"dpmoe needs experts divisible by dp: {num_experts} % {d_deg} != 0")
    else:
        raise ConfigurationError(f"unknown mode {mode!r}, expected 'dpmoe' or 'ppmoe'")
    if d_deg * t_deg * p_deg != world.world_size:
        raise ConfigurationError(
            f"dp*tp*pp = {d_deg}*{t_deg}*{p_deg} = {d_deg * t_deg * p_deg} must equal world size {world.world_size}"
        )

    def rank(p: int, d: int, t: int) -> int:
        return (p * d_deg + d) * t_deg + t

    tp_groups = tuple(
        ProcessGroup(TP, tuple(rank(p, d, t) for t in range(t_deg)))
        for p in range(p_deg)
        for d in range(d_deg)
    )
    dp_groups = tuple(
        ProcessGroup(DP, tuple(rank(p, d, t) for d in range(d_deg)))
        for p in range(p_deg)
        for t in range(t_deg)
    )
    pp_groups = tuple(
        ProcessGroup(PP, tuple(rank(p, d, t) for p in range(p_deg)))
        for d in range(d_deg)
        for t in range(t_deg)
    )
    if mode == "ppmoe":
        ep_groups = tuple(ProcessGroup(EP, g.members) for g in tp_groups)
        for g in ep_groups:
            nodes = {world.node_of(r) for r in g.members}
            if len(nodes) != 1:
                raise ConfigurationError(f"ppmoe expert group {g.members} spans nodes {sorted(nodes)}")
    else:
        ep_groups = tuple(ProcessGroup(EP, g.members) for g in dp_groups)
    return GroupSet(dp=dp_groups, tp=tp_groups, pp=pp_groups, ep=ep_groups)
