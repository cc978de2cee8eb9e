"""Functional reference of a top-1 MoE layer under two parallel architectures.

``dpmoe_forward`` is the all-to-all architecture: every expert-parallel rank
gates its own micro-batch, ships token rows to the ranks owning their experts,
and ships the processed rows back (two all-to-all collectives, optional
per-expert capacity with dropped-token rows left at zero).

``ppmoe_forward`` is the index-slice architecture: the activation is
replicated inside a tensor-parallel group, every rank gates identically,
slices out the rows of its local experts, runs those experts serially, writes
results into a zero buffer, and one all-reduce combines the disjoint partials.

Both paths build gradient graphs over shared parameter objects, so spatial
(concurrent replicas) and temporal (sequential accumulation) spans of a global
batch can be compared gradient-for-gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .collectives import EP, ProcessGroup, World
from .tensor import Rng, Tensor


@dataclass
class GateParams:
    """Routing linear map of shape hidden x experts, replicated on every rank."""

    wg: Tensor

    def __post_init__(self):
        if self.wg.data.ndim != 2:
            raise ValueError(f"gate weight must be 2-D, got {self.wg.shape}")
        if not np.isfinite(self.wg.data).all():
            raise ValueError("gate weight has non-finite entries")

    @property
    def hidden(self) -> int:
        return self.wg.shape[0]

    @property
    def num_experts(self) -> int:
        return self.wg.shape[1]

    @classmethod
    def init(cls, hidden: int, num_experts: int, rng: Rng, scale: float | None = None) -> "GateParams":
        scale = scale if scale is not None else hidden ** -0.5
        return cls(T.randn((hidden, num_experts), rng, scale, requires_grad=True))


@dataclass
class GateOutput:
    """Top-1 routing decision for one batch of token rows."""

    indices: np.ndarray  # chosen expert per token
    weights: Tensor  # gate probability of the chosen expert, shape (tokens,)
    l_aux: Tensor  # scalar balance loss
    scores: Tensor  # full softmax scores, shape (tokens, experts)


@dataclass
class DispatchPlan:
    """Ascending token row ids per expert; under top-1 the lists partition the batch."""

    per_expert: list[list[int]]

    @property
    def num_experts(self) -> int:
        return len(self.per_expert)

    def tokens(self) -> int:
        return sum(len(rows) for rows in self.per_expert)


@dataclass
class ExpertFfn:
    """One expert: Dropout(GeLU(x @ up) @ down), biases optional."""

    up: Tensor
    down: Tensor
    bias_up: Tensor | None = None
    bias_down: Tensor | None = None

    @classmethod
    def init(cls, hidden: int, rng: Rng, ffn_mult: int = 4, bias: bool = True, scale: float | None = None) -> "ExpertFfn":
        scale = scale if scale is not None else hidden ** -0.5
        inner = ffn_mult * hidden
        return cls(
            up=T.randn((hidden, inner), rng, scale, requires_grad=True),
            down=T.randn((inner, hidden), rng, scale, requires_grad=True),
            bias_up=T.randn((inner,), rng, scale, requires_grad=True) if bias else None,
            bias_down=T.randn((hidden,), rng, scale, requires_grad=True) if bias else None,
        )

    def forward(self, x: Tensor, dropout_p: float = 0.0, rng: Rng | None = None) -> Tensor:
        h = T.matmul(x, self.up)
        if self.bias_up is not None:
            h = T.add(h, self.bias_up)
        h = T.matmul(T.gelu(h), self.down)
        if self.bias_down is not None:
            h = T.add(h, self.bias_down)
        return T.dropout(h, dropout_p, rng)

    def parameters(self) -> list[Tensor]:
        return [p for p in (self.up, self.down, self.bias_up, self.bias_down) if p is not None]


@dataclass
class MoeLayerWeights:
    """Gate plus the full ascending-id expert list (placement-independent)."""

    gate: GateParams
    experts: list[ExpertFfn]

    @classmethod
    def init(cls, hidden: int, num_experts: int, rng: Rng, bias: bool = True) -> "MoeLayerWeights":
        gate = GateParams.init(hidden, num_experts, rng.spawn(1))
        experts = [ExpertFfn.init(hidden, rng.spawn(10 + e), bias=bias) for e in range(num_experts)]
        return cls(gate, experts)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"gate.wg": self.gate.wg}
        for e, ex in enumerate(self.experts):
            out[f"expert{e}.up"] = ex.up
            out[f"expert{e}.down"] = ex.down
            if ex.bias_up is not None:
                out[f"expert{e}.bias_up"] = ex.bias_up
            if ex.bias_down is not None:
                out[f"expert{e}.bias_down"] = ex.bias_down
        return out

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def shard(self, ranks: int) -> list[list[ExpertFfn]]:
        """Contiguous expert blocks, ascending ids, one block per rank."""
        e = len(self.experts)
        if e % ranks != 0:
            raise ValueError(f"{e} experts do not divide over {ranks} ranks")
        n = e // ranks
        return [self.experts[r * n : (r + 1) * n] for r in range(ranks)]


@dataclass
class LayerConfig:
    """MoE layer settings as ingested from planner JSON."""

    hidden: int
    experts: int
    tp: int
    capacity_factor: float = math.inf
    weight_scaling: bool = True
    dropout_p: float = 0.0
    seed: int = 0

    _FIELDS = ("hidden", "experts", "tp", "capacity_factor", "weight_scaling", "dropout_p", "seed")

    @classmethod
    def from_dict(cls, raw: dict) -> "LayerConfig":
        unknown = set(raw) - set(cls._FIELDS)
        if unknown:
            raise ValueError(f"unknown layer config fields: {sorted(unknown)}")
        if raw.get("capacity_factor") == "inf":
            raw = {**raw, "capacity_factor": math.inf}
        cfg = cls(**raw)
        if cfg.hidden < 1 or cfg.experts < 1 or cfg.tp < 1:
            raise ValueError("hidden, experts and tp must be positive")
        if cfg.experts % cfg.tp != 0:
            raise ValueError(f"experts must divide over tp ranks: {cfg.experts} % {cfg.tp} != 0")
        if not (cfg.capacity_factor > 0):
            raise ValueError("capacity_factor must be positive (may be inf)")
        return cfg

    def to_dict(self) -> dict:
        cf = self.capacity_factor
        return {
            "hidden": self.hidden,
            "experts": self.experts,
            "tp": self.tp,
            "capacity_factor": cf if math.isfinite(cf) else "inf",
            "weight_scaling": self.weight_scaling,
            "dropout_p": self.dropout_p,
            "seed": self.seed,
        }


# ---------------------------------------------------------------------- gating


def gate_top1(hidden: Tensor, gate: GateParams, route_override=None) -> GateOutput:
    """Softmax scores, argmax routing (lowest expert id wins ties), balance loss."""
    scores = T.softmax(T.matmul(hidden, gate.wg), axis=-1)
    if route_override is not None:
        indices = np.asarray(route_override, dtype=np.intp)
        if indices.shape != (hidden.shape[0],):
            raise ValueError(f"route override needs one expert id per token, got {indices.shape}")
        if indices.min(initial=0) < 0 or indices.max(initial=0) >= gate.num_experts:
            raise ValueError("route override contains expert ids out of range")
    else:
        indices = scores.data.argmax(axis=-1)
    weights = T.gather_rowwise(scores, indices)
    return GateOutput(indices, weights, aux_loss(indices, scores, gate.num_experts), scores)


def aux_loss(indices: np.ndarray, scores: Tensor, num_experts: int) -> Tensor:
    """Balance regularizer: experts * sum_e assigned_fraction_e * mean_score_e.

    Equals 1 under perfectly uniform assignment and num_experts when one
    expert absorbs everything with probability one. The assigned fractions are
    constants; gradients flow through the mean scores only.
    """
    n = len(indices)
    if n == 0:
        raise ValueError("aux_loss of zero tokens is undefined")
    frac = np.bincount(indices, minlength=num_experts) / n
    weighted = T.matmul(scores, T.tensor(frac.reshape(num_experts, 1)))
    return T.smul(T.tsum(weighted), num_experts / n)


def build_dispatch_plan(indices, num_experts: int) -> DispatchPlan:
    """Ascending token positions per expert from per-token expert ids."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= num_experts):
        bad = idx[(idx < 0) | (idx >= num_experts)][0]
        raise ValueError(f"expert id {int(bad)} out of range for {num_experts} experts")
    per_expert: list[list[int]] = [[] for _ in range(num_experts)]
    for pos, e in enumerate(idx):
        per_expert[int(e)].append(pos)
    return DispatchPlan(per_expert)


def _as_single(value, what: str):
    """Collapse a replica list to its logical value, checking exact agreement."""
    if isinstance(value, (list, tuple)):
        first = value[0]
        ref = first.wg.data if isinstance(first, GateParams) else first.data
        for r, other in enumerate(value[1:], start=1):
            data = other.wg.data if isinstance(other, GateParams) else other.data
            if not np.array_equal(ref, data):
                raise ValueError(f"TP replica divergence: {what} differs on rank {r}")
        return first
    return value


# ---------------------------------------------------------------- ppmoe path


def ppmoe_forward(
    world: World,
    group: ProcessGroup,
    hidden,
    gate,
    experts_by_rank: list[list[ExpertFfn]],
    *,
    weight_scaling: bool = True,
    dropout_p: float = 0.0,
    rng: Rng | None = None,
    route_override=None,
) -> tuple[Tensor, Tensor]:
    """Index-slice dispatch with all-reduce combine over a tensor-parallel group.

    Every rank receives the identical replicated activation, gates it the same
    way, runs its local experts serially in ascending expert-id order, scatters
    the results into a zero buffer at the original token rows, and the group
    all-reduce adds the disjoint per-rank buffers into the dense output. The
    backward pass accounts one more all-reduce for the input gradient.

    ``hidden`` and ``gate`` may be given as per-rank replica lists; replicas
    must agree exactly.
    """
    hidden = _as_single(hidden, "hidden activation")
    gate = _as_single(gate, "gate weight")
    tp = group.size
    if len(experts_by_rank) != tp:
        raise ValueError(f"need one expert list per rank: {len(experts_by_rank)} for group of {tp}")
    num_local = len(experts_by_rank[0])
    num_experts = gate.num_experts
    if any(len(ex) != num_local for ex in experts_by_rank) or num_local * tp != num_experts:
        raise ValueError(f"{num_experts} experts must spread evenly over {tp} ranks")

    replicas = world.tp_region(group, hidden)
    gates = [gate_top1(replica, gate, route_override) for replica in replicas]
    for r, g in enumerate(gates[1:], start=1):
        if not np.array_equal(g.indices, gates[0].indices):
            raise ValueError(f"TP replica divergence: dispatch order differs on rank {r}")
    plan = build_dispatch_plan(gates[0].indices, num_experts)

    partials = []
    for r in range(tp):
        part = T.zeros(hidden.shape)
        for local, expert in enumerate(experts_by_rank[r]):
            rows = plan.per_expert[r * num_local + local]
            if not rows:
                continue
            out_rows = expert.forward(T.index_select(replicas[r], rows), dropout_p, rng)
            if weight_scaling:
                out_rows = T.scale_rows(out_rows, T.index_select(gates[r].weights, rows))
            part = T.index_assign(part, rows, out_rows)
        partials.append(part)

    combined = world.all_reduce_sum(group, partials)[0]
    return combined, gates[0].l_aux


def sync_gate_gradients(world: World, group: ProcessGroup, gate: GateParams) -> None:
    """Account the once-per-global-batch all-reduce of the gate weight gradient."""
    world.account_gradient_sync(group, gate.wg.numel)


def dense_tp_ffn_forward(world: World, group: ProcessGroup, hidden: Tensor, ffn: ExpertFfn) -> Tensor:
    """Tensor-parallel dense FFN reference: column/row sharded, one all-reduce.

    Used to demonstrate that the ppmoe combine moves exactly the bytes a dense
    tensor-parallel FFN of the same activation shape would.
    """
    tp = group.size
    inner = ffn.up.shape[1]
    if inner % tp != 0:
        raise ValueError(f"ffn inner width {inner} must divide over {tp} ranks")
    step = inner // tp
    partials = []
    for r in range(tp):
        up_slice = T.tensor(ffn.up.data[:, r * step : (r + 1) * step])
        down_slice = T.tensor(ffn.down.data[r * step : (r + 1) * step, :])
        partials.append(T.matmul(T.gelu(T.matmul(hidden, up_slice)), down_slice))
    out = world.all_reduce_sum(group, partials)[0]
    if ffn.bias_down is not None:
        out = T.add(out, ffn.bias_down)
    return out


# ---------------------------------------------------------------- dpmoe path


def _empty_rows(width: int) -> Tensor:
    return T.tensor(np.zeros((0, width)))


def _capacity_mask(indices_per_rank: list[np.ndarray], num_experts: int, capacity_factor: float) -> list[np.ndarray]:
    """Keep the first ``capacity`` tokens per expert in ascending global token id."""
    tokens_per_rank = len(indices_per_rank[0])
    dp = len(indices_per_rank)
    kept = [np.ones(len(ids), dtype=bool) for ids in indices_per_rank]
    if math.isinf(capacity_factor):
        return kept
    capacity = math.ceil(capacity_factor * tokens_per_rank * dp / num_experts)
    fill = np.zeros(num_experts, dtype=np.int64)
    for r, ids in enumerate(indices_per_rank):
        for i, e in enumerate(ids):
            if fill[e] < capacity:
                fill[e] += 1
            else:
                kept[r][i] = False
    return kept


def dpmoe_forward(
    world: World,
    ep_group: ProcessGroup,
    hidden_per_rank: list[Tensor],
    gate,
    *,
    experts_by_rank: list[list[ExpertFfn]],
    capacity_factor: float = math.inf,
    weight_scaling: bool = True,
    dropout_p: float = 0.0,
    rng: Rng | None = None,
    route_overrides=None,
) -> list[tuple[Tensor, Tensor]]:
    """All-to-all dispatch: route, process on owning ranks, route back, reorder.

    Every expert-parallel rank holds its own micro-batch and a contiguous block
    of experts. Tokens over an expert's capacity are dropped: never shipped,
    and their output rows stay zero (the residual path outside the layer keeps
    the token alive). Returns the (output, balance loss) pair of every rank.
    """
    gate = _as_single(gate, "gate weight")
    dp = ep_group.size
    if len(hidden_per_rank) != dp or len(experts_by_rank) != dp:
        raise ValueError(f"need hidden and experts for each of {dp} ranks")
    num_local = len(experts_by_rank[0])
    num_experts = gate.num_experts
    if any(len(ex) != num_local for ex in experts_by_rank) or num_local * dp != num_experts:
        raise ValueError(f"{num_experts} experts must spread evenly over {dp} ranks")
    widths = {h.shape[1] for h in hidden_per_rank}
    sizes = {h.shape[0] for h in hidden_per_rank}
    if len(widths) != 1 or len(sizes) != 1:
        raise ValueError("all ranks must hold micro-batches of identical shape")
    width = widths.pop()

    gates = [
        gate_top1(hidden_per_rank[r], gate, None if route_overrides is None else route_overrides[r])
        for r in range(dp)
    ]
    kept = _capacity_mask([g.indices for g in gates], num_experts, capacity_factor)
    plans = [build_dispatch_plan(g.indices, num_experts) for g in gates]

    # rows each source sends to each owner, grouped by expert id then token row
    rows_to_owner: list[list[list[int]]] = [[[] for _ in range(dp)] for _ in range(dp)]
    section_rows: list[list[list[list[int]]]] = [
        [[[] for _ in range(num_local)] for _ in range(dp)] for _ in range(dp)
    ]
    for src in range(dp):
        for e in range(num_experts):
            owner, local = divmod(e, num_local)
            live = [i for i in plans[src].per_expert[e] if kept[src][i]]
            rows_to_owner[src][owner].extend(live)
            section_rows[src][owner][local] = live

    splits = [
        [
            T.index_select(hidden_per_rank[src], rows) if rows else _empty_rows(width)
            for rows in rows_to_owner[src]
        ]
        for src in range(dp)
    ]
    arrived = world.all_to_all(ep_group, splits)

    # owner side: regroup rows per local expert across sources, run experts serially
    returned: list[list[Tensor]] = [[None] * dp for _ in range(dp)]  # [owner][src]
    for owner in range(dp):
        out_sections: list[list[Tensor | None]] = [[None] * dp for _ in range(num_local)]
        per_src_offset = [0] * dp
        gathered: list[list[Tensor]] = [[] for _ in range(num_local)]
        gathered_weights: list[list[Tensor]] = [[] for _ in range(num_local)]
        spans: list[list[tuple[int, int]]] = [[] for _ in range(num_local)]  # (src, count)
        for local in range(num_local):
            for src in range(dp):
                rows = section_rows[src][owner][local]
                if not rows:
                    continue
                lo = per_src_offset[src]
                hi = lo + len(rows)
                per_src_offset[src] = hi
                gathered[local].append(T.index_select(arrived[owner][src], list(range(lo, hi))))
                gathered_weights[local].append(T.index_select(gates[src].weights, rows))
                spans[local].append((src, len(rows)))
        for local, expert in enumerate(experts_by_rank[owner]):
            if not gathered[local]:
                continue
            x_e = T.concat_rows(gathered[local])
            y_e = expert.forward(x_e, dropout_p, rng)
            if weight_scaling:
                y_e = T.scale_rows(y_e, T.concat_rows(gathered_weights[local]))
            offset = 0
            for src, count in spans[local]:
                out_sections[local][src] = T.index_select(y_e, list(range(offset, offset + count)))
                offset += count
        for src in range(dp):
            pieces = [out_sections[local][src] for local in range(num_local) if out_sections[local][src] is not None]
            returned[owner][src] = T.concat_rows(pieces) if pieces else _empty_rows(width)

    back = world.all_to_all(ep_group, returned)

    results: list[tuple[Tensor, Tensor]] = []
    for src in range(dp):
        out = T.zeros(hidden_per_rank[src].shape)
        for owner in range(dp):
            rows = rows_to_owner[src][owner]
            if rows:
                out = T.index_assign(out, rows, back[src][owner])
        results.append((out, gates[src].l_aux))
    return results


# ------------------------------------------------------- global batch spans


def global_batch_equivalence(
    weights: MoeLayerWeights,
    global_batch: list[np.ndarray],
    dp: int,
    *,
    tp: int = 1,
    include_aux: bool = True,
    weight_scaling: bool = True,
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Gradients of one global batch spanned spatially vs temporally.

    Spatial: the micro-batches sit on ``dp`` concurrent expert-parallel ranks
    (all-to-all architecture) and parameter gradients are reconciled by
    all-reduce, i.e. summed. Temporal: the same micro-batches run sequentially
    through the index-slice architecture on a ``tp`` group and gradients
    accumulate. The loss per micro-batch is sum(output) plus, optionally, the
    balance loss. Returns (spatial, temporal) gradient snapshots.
    """
    if len(global_batch) != dp:
        raise ValueError(f"global batch of {len(global_batch)} micro-batches does not span dp={dp}")

    def snapshot() -> dict[str, np.ndarray]:
        return {name: p.grad.copy() for name, p in weights.named_parameters().items() if p.grad is not None}

    # spatial: dp concurrent ranks, experts distributed over the ep group
    weights.zero_grad()
    world_s = World(1, dp)
    ep = ProcessGroup(EP, tuple(range(dp)))
    hidden_s = [T.tensor(x) for x in global_batch]
    results = dpmoe_forward(
        world_s,
        ep,
        hidden_s,
        weights.gate,
        experts_by_rank=weights.shard(dp),
        capacity_factor=math.inf,
        weight_scaling=weight_scaling,
    )
    loss = None
    for out, l_aux in results:
        term = T.add(T.tsum(out), l_aux) if include_aux else T.tsum(out)
        loss = term if loss is None else T.add(loss, term)
    T.backward(loss)
    grads_spatial = snapshot()

    # temporal: the same micro-batches one after another, gradient accumulation
    weights.zero_grad()
    world_t = World(1, tp)
    group = ProcessGroup(EP, tuple(range(tp)))
    shards = weights.shard(tp)
    for x in global_batch:
        out, l_aux = ppmoe_forward(
            world_t, group, T.tensor(x), weights.gate, shards, weight_scaling=weight_scaling
        )
        term = T.add(T.tsum(out), l_aux) if include_aux else T.tsum(out)
        T.backward(term)
    sync_gate_gradients(world_t, group, weights.gate)
    grads_temporal = snapshot()
    return grads_spatial, grads_temporal
