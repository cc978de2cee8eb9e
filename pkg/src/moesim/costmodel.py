"""Analytical latency, FLOPs, parameter and memory model for MoE layouts.

Conventions shared by everything below:

- activations carry 2 bytes per element, so one micro-batch activation of
  ``batch x seq x hidden`` moves 2*b*s*h bytes;
- ring all-reduce of per-rank payload m over N ranks: 2*(N-1)*(t_s + m/B);
- all-to-all over N ranks with per-peer chunk m: (N-1)*(t_s + m*N/(2B));
- an FFN on n tokens of width h costs 16*n*h^2 FLOPs, attention half that;
- backward of any layer doubles the compute terms and repeats the
  communication terms unchanged.

All functions are pure; bandwidths are picked per link from the cluster
profile depending on whether the group stays inside one node.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

ELEM_BYTES = 2.0
PARAM_BYTES = 18.0  # fp16 weight+grad (4) plus master copy and two moments (14)
PARAM_BYTES_REPLICATED = 4.0
PARAM_BYTES_SHARDED = 14.0

DPMOE = "dpmoe"
PPMOE = "ppmoe"
MODES = (DPMOE, PPMOE)

LAYER_KINDS = ("attention", "dense_ffn", "moe_dpmoe", "moe_ppmoe")


@dataclass(frozen=True)
class ModelShape:
    """Transformer shape: layer count, widths, batch geometry, expert layout."""

    layers: int
    hidden: int
    heads: int
    seq_len: int
    vocab: int
    micro_batch: int
    experts: int = 1
    moe_every: int = 2

    def __post_init__(self):
        for name in ("layers", "hidden", "heads", "seq_len", "vocab", "micro_batch", "experts", "moe_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.layers < self.moe_every:
            raise ValueError(f"moe_every {self.moe_every} exceeds layer count {self.layers}")

    @property
    def tokens(self) -> int:
        return self.micro_batch * self.seq_len

    @property
    def moe_layer_count(self) -> int:
        """MoE layers at the configured stride; a single expert means none."""
        return self.layers // self.moe_every if self.experts > 1 else 0

    @property
    def dense_layer_count(self) -> int:
        return self.layers - self.moe_layer_count


@dataclass(frozen=True)
class ClusterProfile:
    """Device throughput, link bandwidths and memory of the training cluster."""

    flops: float  # per-device throughput, FLOP/s
    bw_intra: float  # intra-node bandwidth, bytes/s
    bw_inter: float  # inter-node bandwidth, bytes/s
    startup: float  # per-hop startup latency, s
    nodes: int
    devices_per_node: int
    mem_per_device: float  # bytes

    def __post_init__(self):
        for name in ("flops", "bw_intra", "bw_inter", "mem_per_device"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.startup < 0:
            raise ValueError("startup latency cannot be negative")
        if self.nodes < 1 or self.devices_per_node < 1:
            raise ValueError("cluster needs at least one node and one device per node")

    @property
    def device_count(self) -> int:
        return self.nodes * self.devices_per_node


@dataclass(frozen=True)
class ParallelDegrees:
    """Data / tensor / pipeline degrees plus the MoE architecture mode."""

    dp: int
    tp: int
    pp: int
    mode: str

    def __post_init__(self):
        if min(self.dp, self.tp, self.pp) < 1:
            raise ValueError(f"degrees must be positive, got {self.dp}/{self.tp}/{self.pp}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def device_count(self) -> int:
        return self.dp * self.tp * self.pp

    @property
    def ep_world(self) -> int:
        """Expert-group size: the tensor group in ppmoe, the data group in dpmoe."""
        return self.tp if self.mode == PPMOE else self.dp


_COMPUTE_FIELDS = ("gating", "expert_compute", "ffn_compute", "attention_compute", "others")
_COMM_FIELDS = ("a2a_first", "a2a_second", "moe_all_reduce", "ffn_all_reduce", "attention_all_reduce")


@dataclass(frozen=True)
class LatencyBreakdown:
    """Named per-component latencies in seconds; total is their sum."""

    gating: float = 0.0
    a2a_first: float = 0.0
    a2a_second: float = 0.0
    expert_compute: float = 0.0
    moe_all_reduce: float = 0.0
    ffn_compute: float = 0.0
    ffn_all_reduce: float = 0.0
    attention_compute: float = 0.0
    attention_all_reduce: float = 0.0
    others: float = 0.0

    @property
    def total(self) -> float:
        return sum(getattr(self, f.name) for f in fields(self))

    @property
    def compute_total(self) -> float:
        return sum(getattr(self, f) for f in _COMPUTE_FIELDS)

    @property
    def comm_total(self) -> float:
        return sum(getattr(self, f) for f in _COMM_FIELDS)

    def plus(self, other: "LatencyBreakdown") -> "LatencyBreakdown":
        return LatencyBreakdown(**{f.name: getattr(self, f.name) + getattr(other, f.name) for f in fields(self)})

    def scaled(self, k: float) -> "LatencyBreakdown":
        return LatencyBreakdown(**{f.name: k * getattr(self, f.name) for f in fields(self)})

    def backward(self) -> "LatencyBreakdown":
        """Backward pass: compute terms double, communication terms repeat."""
        doubled = {f: 2.0 * getattr(self, f) for f in _COMPUTE_FIELDS}
        return replace(self, **doubled)

    def as_dict(self) -> dict[str, float]:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["total"] = self.total
        return out


# ------------------------------------------------------------------ formulas


def flops_ffn_per_expert(shape: ModelShape, worst_case: bool = False) -> float:
    """FFN FLOPs landing on one expert for one micro-batch: 16*b*s*h^2 / E.

    The even-routing best case divides the dense FFN cost across all experts;
    the worst case (all tokens on one expert) is the undivided 16*b*s*h^2.
    """
    dense = 16.0 * shape.tokens * shape.hidden**2
    return dense if worst_case else dense / shape.experts


def lat_all_to_all(n_ranks: int, chunk_bytes: float, bandwidth: float, startup: float = 0.0) -> float:
    """All-to-all latency (N-1)*(t_s + m*N/(2B)) for per-peer chunk of m bytes."""
    if n_ranks < 1:
        raise ValueError(f"need at least one rank, got {n_ranks}")
    return (n_ranks - 1) * (startup + chunk_bytes * n_ranks / (2.0 * bandwidth))


def lat_all_reduce(n_ranks: int, payload_bytes: float, bandwidth: float, startup: float = 0.0) -> float:
    """Ring all-reduce latency 2*(N-1)*(t_s + m/B) for per-rank payload m bytes."""
    if n_ranks < 1:
        raise ValueError(f"need at least one rank, got {n_ranks}")
    return 2.0 * (n_ranks - 1) * (startup + payload_bytes / bandwidth)


def ratio_a2a_ffn(experts: int, flops: float, bandwidth: float, hidden: float) -> float:
    """Dispatch-to-compute latency ratio (E-1)*E*F / (16*B*h) of the a2a architecture."""
    return (experts - 1) * experts * flops / (16.0 * bandwidth * hidden)


def ratio_a2a_ffn_bound(experts: int) -> float:
    """Lower bound (E-1)*E/16 of the ratio above, valid whenever F/(B*h) >= 1."""
    return (experts - 1) * experts / 16.0


def ratio_allreduce_cal(tp: int, flops: float, bandwidth: float, hidden: float) -> float:
    """Tensor-parallel all-reduce-to-compute ratio (T-1)*T*F / (4*B*h)."""
    return (tp - 1) * tp * flops / (4.0 * bandwidth * hidden)


def ffn_compute_latency(shape: ModelShape, tp: int, flops: float) -> float:
    """Dense tensor-parallel FFN compute: 16*b*s*h^2 / (T*F)."""
    return 16.0 * shape.tokens * shape.hidden**2 / (tp * flops)


def activation_bytes(shape: ModelShape, elem_bytes: float = ELEM_BYTES) -> float:
    """Bytes of one micro-batch activation: elem_bytes * b * s * h."""
    return elem_bytes * shape.tokens * shape.hidden


# ------------------------------------------------------------ link selection


@dataclass(frozen=True)
class LinkProfile:
    """Bandwidth per logical link, derived from group placement on the nodes."""

    tp_bw: float
    ep_bw: float
    pp_bw: float
    tp_intra: bool
    ep_intra: bool
    pp_intra: bool


def link_profile(degrees: ParallelDegrees, profile: ClusterProfile) -> LinkProfile:
    """Pick intra- vs inter-node bandwidth for each group of the layout.

    Rank layout is (p*D + d)*T + t, matching the simulated world: tensor
    groups are contiguous blocks of T, expert groups in dpmoe mode are
    D-strided blocks spanning D*T ranks, and pipeline neighbors sit D*T ranks
    apart. A group uses the intra-node link only when its whole span provably
    fits inside one node.
    """
    dpn = profile.devices_per_node

    def fits(span: int) -> bool:
        return span <= dpn and dpn % span == 0

    tp_intra = fits(degrees.tp)
    ep_intra = tp_intra if degrees.mode == PPMOE else fits(degrees.dp * degrees.tp)
    pp_intra = fits(degrees.dp * degrees.tp * degrees.pp)
    pick = lambda intra: profile.bw_intra if intra else profile.bw_inter
    return LinkProfile(pick(tp_intra), pick(ep_intra), pick(pp_intra), tp_intra, ep_intra, pp_intra)


# --------------------------------------------------------------- layer model


def layer_forward_latency(
    shape: ModelShape,
    degrees: ParallelDegrees,
    profile: ClusterProfile,
    layer_kind: str,
    include_gating: bool = False,
) -> LatencyBreakdown:
    """Forward latency breakdown of one block of the given kind.

    - attention: 8*b*s*h^2/(T*F) compute plus one tensor-group all-reduce;
    - dense_ffn: 16*b*s*h^2/(T*F) compute plus one tensor-group all-reduce;
    - moe_dpmoe: gating (omitted by default), dispatch all-to-all, expert
      compute for this micro-batch slice, combine all-to-all;
    - moe_ppmoe: gating (omitted by default), serial local experts (same work
      as the dense tensor-parallel FFN), one intra-node all-reduce.
    """
    links = link_profile(degrees, profile)
    act = activation_bytes(shape)
    t_s = profile.startup
    gating = (
        2.0 * shape.tokens * shape.hidden * shape.experts / (degrees.tp * profile.flops)
        if include_gating
        else 0.0
    )

    if layer_kind == "attention":
        return LatencyBreakdown(
            attention_compute=8.0 * shape.tokens * shape.hidden**2 / (degrees.tp * profile.flops),
            attention_all_reduce=lat_all_reduce(degrees.tp, act, links.tp_bw, t_s),
        )
    if layer_kind == "dense_ffn":
        return LatencyBreakdown(
            ffn_compute=ffn_compute_latency(shape, degrees.tp, profile.flops),
            ffn_all_reduce=lat_all_reduce(degrees.tp, act, links.tp_bw, t_s),
        )
    if layer_kind == "moe_dpmoe":
        n = degrees.ep_world
        a2a = lat_all_to_all(n, act / n, links.ep_bw, t_s)
        return LatencyBreakdown(
            gating=gating,
            a2a_first=a2a,
            a2a_second=a2a,
            expert_compute=16.0 * shape.tokens * shape.hidden**2 / (n * degrees.tp * profile.flops),
        )
    if layer_kind == "moe_ppmoe":
        return LatencyBreakdown(
            gating=gating,
            expert_compute=ffn_compute_latency(shape, degrees.tp, profile.flops),
            moe_all_reduce=lat_all_reduce(degrees.tp, act, links.tp_bw, t_s),
        )
    raise ValueError(f"unknown layer kind {layer_kind!r}, expected one of {LAYER_KINDS}")


def model_forward_breakdown(
    shape: ModelShape,
    degrees: ParallelDegrees,
    profile: ClusterProfile,
    include_gating: bool = False,
) -> LatencyBreakdown:
    """One micro-batch forward through all layers (attention + FFN/MoE each)."""
    moe_kind = "moe_ppmoe" if degrees.mode == PPMOE else "moe_dpmoe"
    attn = layer_forward_latency(shape, degrees, profile, "attention")
    dense = layer_forward_latency(shape, degrees, profile, "dense_ffn")
    moemix = layer_forward_latency(shape, degrees, profile, moe_kind, include_gating)
    return (
        attn.scaled(shape.layers)
        .plus(dense.scaled(shape.dense_layer_count))
        .plus(moemix.scaled(shape.moe_layer_count))
    )


# ------------------------------------------------------------------- params


@dataclass(frozen=True)
class ParamCounts:
    """Parameter totals split into expert-owned and everything else.

    Closed form per layer of hidden width h: attention 4h^2 + 4h, FFN
    8h^2 + 5h, two layernorms 4h. An MoE layer replicates the FFN across E
    experts and adds an h*E gating map. Embeddings contribute (V + s)*h and a
    final layernorm 2h.
    """

    total: float
    expert_ffn: float
    gating: float
    non_expert: float
    embedding: float

    def as_dict(self) -> dict[str, float]:
        return {
            "total": self.total,
            "expert_ffn": self.expert_ffn,
            "gating": self.gating,
            "non_expert": self.non_expert,
            "embedding": self.embedding,
        }


def param_count(shape: ModelShape) -> ParamCounts:
    """Count parameters of the configured model (see ParamCounts for the form)."""
    h = shape.hidden
    attention = 4.0 * h * h + 4.0 * h
    ffn = 8.0 * h * h + 5.0 * h
    norms = 4.0 * h
    moe_layers = shape.moe_layer_count
    dense_layers = shape.dense_layer_count

    embedding = (shape.vocab + shape.seq_len) * h + 2.0 * h
    expert_ffn = moe_layers * shape.experts * ffn
    gating = moe_layers * h * shape.experts
    backbone = shape.layers * (attention + norms) + dense_layers * ffn
    total = embedding + backbone + gating + expert_ffn
    return ParamCounts(
        total=total,
        expert_ffn=expert_ffn,
        gating=gating,
        non_expert=total - expert_ffn,
        embedding=embedding,
    )


# ------------------------------------------------------------------- memory


@dataclass(frozen=True)
class MemoryEstimate:
    """Per-device parameter storage under the 18-bytes-per-parameter budget."""

    params_per_device: float
    bytes_per_device: float
    feasible: bool
    zero_enabled: bool

    def as_dict(self) -> dict[str, float | bool]:
        return {
            "params_per_device": self.params_per_device,
            "bytes_per_device": self.bytes_per_device,
            "feasible": self.feasible,
            "zero_enabled": self.zero_enabled,
        }


def memory_per_device(
    shape: ModelShape,
    degrees: ParallelDegrees,
    profile: ClusterProfile,
    zero_enabled: bool = False,
) -> MemoryEstimate:
    """Parameter memory per device: 18 bytes split 4 replicated + 14 shardable.

    Non-expert parameters shard over tensor slices and pipeline stages and
    replicate across data ranks; optimizer state (the 14-byte share) divides
    by the data degree when the stage-sharding optimizer is on. Expert
    parameters additionally divide across the data dimension in dpmoe mode --
    but there each expert lives on exactly one rank, so its optimizer state
    has no replicas to shard over. Activations are out of scope; memory over
    budget flags the layout infeasible rather than raising.
    """
    counts = param_count(shape)
    slices = degrees.tp * degrees.pp
    non_expert_pd = counts.non_expert / slices
    if degrees.mode == DPMOE:
        expert_pd = counts.expert_ffn / (degrees.dp * slices)
        expert_shard = 1.0
    else:
        expert_pd = counts.expert_ffn / slices
        expert_shard = float(degrees.dp) if zero_enabled else 1.0
    non_expert_shard = float(degrees.dp) if zero_enabled else 1.0

    params_pd = non_expert_pd + expert_pd
    total_bytes = PARAM_BYTES_REPLICATED * params_pd + PARAM_BYTES_SHARDED * (
        non_expert_pd / non_expert_shard + expert_pd / expert_shard
    )
    return MemoryEstimate(
        params_per_device=params_pd,
        bytes_per_device=total_bytes,
        feasible=total_bytes <= profile.mem_per_device,
        zero_enabled=zero_enabled,
    )


# ------------------------------------------------------------ breakdown math


@dataclass(frozen=True)
class BreakdownRow:
    name: str
    value: float
    pct_total: float
    pct_moe: float | None


@dataclass(frozen=True)
class BreakdownReport:
    """Percentage view of raw per-component times, Table-style."""

    unit: str
    total: float
    moe_total: float | None
    rows: tuple[BreakdownRow, ...]

    def row(self, name: str) -> BreakdownRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(f"no breakdown row named {name!r}")

    def pct_sum(self, names: list[str]) -> float:
        return sum(self.row(n).pct_total for n in names)

    def as_dict(self) -> dict:
        return {
            "unit": self.unit,
            "total": self.total,
            "moe_total": self.moe_total,
            "rows": [
                {"name": r.name, "value": r.value, "pct_total": r.pct_total, "pct_moe": r.pct_moe}
                for r in self.rows
            ],
        }


def breakdown_report(
    total: float,
    components: list[tuple[str, float, bool]],
    moe_total: float | None = None,
    combined: list[tuple[str, list[str]]] | None = None,
    unit: str = "ms",
) -> BreakdownReport:
    """Percentages of total (and of the MoE subtotal for MoE-side components).

    ``components`` are (name, value, counts_toward_moe) triples; ``combined``
    adds derived rows summing named components, e.g. both all-to-all phases.
    """
    if total <= 0:
        raise ValueError(f"breakdown total must be positive, got {total}")
    values = {name: value for name, value, _ in components}
    rows = []
    for name, value, is_moe in components:
        pct_moe = 100.0 * value / moe_total if (is_moe and moe_total) else None
        rows.append(BreakdownRow(name, value, 100.0 * value / total, pct_moe))
    for name, parts in combined or []:
        missing = [p for p in parts if p not in values]
        if missing:
            raise ValueError(f"combined row {name!r} references unknown components {missing}")
        value = sum(values[p] for p in parts)
        pct_moe = 100.0 * value / moe_total if moe_total else None
        rows.append(BreakdownRow(name, value, 100.0 * value / total, pct_moe))
    return BreakdownReport(unit=unit, total=total, moe_total=moe_total, rows=tuple(rows))
