"""Dense float64 tensors with a small fixed op set and reverse-mode gradients.

Everything is row-major and single-threaded. Ops build a graph by closing over
their inputs; ``backward`` walks the graph in reverse topological order. The
op set is intentionally minimal: just enough for gating, expert FFNs, and the
token dispatch/combine paths of the two MoE architectures.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_ids = itertools.count()

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Rng:
    """Counter-based deterministic random stream (Philox).

    Identical (seed, stream, draw index) produce identical values on every
    platform; independent streams never share draws.
    """

    def __init__(self, seed: int, stream: int = 0):
        if seed < 0 or stream < 0:
            raise ValueError(f"seed and stream must be non-negative, got ({seed}, {stream})")
        self.seed = seed
        self.stream = stream
        key = np.array([seed, stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def normal(self, shape: Sequence[int], scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=tuple(shape))

    def uniform(self, shape: Sequence[int]) -> np.ndarray:
        return self._gen.uniform(0.0, 1.0, size=tuple(shape))

    def integers(self, low: int, high: int, count: int) -> np.ndarray:
        return self._gen.integers(low, high, size=count)

    def spawn(self, stream: int) -> "Rng":
        """Fresh generator on a sibling sub-stream of the same seed."""
        return Rng(self.seed, stream)


class Tensor:
    """N-dimensional float64 value, immutable once built.

    ``requires_grad`` marks leaves; derived tensors inherit it. After a
    ``backward`` pass every reachable tensor that requires grad holds a
    ``grad`` array of the same shape as its value.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape_id", "_parents", "_backward", "op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple = (),
        _backward: Callable[[np.ndarray], None] | None = None,
        op: str = "leaf",
    ):
        if op == "leaf":
            arr = np.array(data, dtype=np.float64, order="C", copy=True)
        else:
            # op results are freshly allocated (or deliberately shared, e.g.
            # replica views); re-copying them would dominate the runtime
            arr = np.asarray(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape_id = next(_ids)
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def numel(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(())[()])

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            # own a copy: g is often another node's grad buffer
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=requires_grad)


def randn(shape: Sequence[int], rng: Rng, scale: float = 1.0, requires_grad: bool = False) -> Tensor:
    return Tensor(rng.normal(shape, scale), requires_grad=requires_grad)


def _needs_grad(*ts: Tensor) -> bool:
    return any(t.requires_grad for t in ts)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """C = A @ B for 2-D tensors; inner dimensions must agree."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return Tensor(out_data, _needs_grad(a, b), (a, b), backward, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a 1-D bias broadcast over leading rows."""
    if a.shape != b.shape and not (b.data.ndim == 1 and a.shape[-1] == b.shape[0]):
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}")
    out_data = a.data + b.data
    bias_like = a.shape != b.shape

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g.reshape(-1, b.shape[0]).sum(axis=0) if bias_like else g)

    return Tensor(out_data, _needs_grad(a, b), (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} * {b.shape}")
    out_data = a.data * b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return Tensor(out_data, _needs_grad(a, b), (a, b), backward, "mul")


def smul(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    out_data = a.data * c

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g * c)

    return Tensor(out_data, a.requires_grad, (a,), backward, "smul")


def scale_rows(x: Tensor, v: Tensor) -> Tensor:
    """Scale row i of ``x`` by scalar ``v[i]``."""
    if v.data.ndim != 1 or x.shape[0] != v.shape[0]:
        raise ValueError(f"scale_rows shape mismatch: {x.shape} rows vs {v.shape}")
    out_data = x.data * v.data[:, None]

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(g * v.data[:, None])
        if v.requires_grad:
            v.accumulate_grad((g * x.data).sum(axis=1))

    return Tensor(out_data, _needs_grad(x, v), (x, v), backward, "scale_rows")


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GeLU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    e = erf(x.data * _INV_SQRT2)
    out_data = 0.5 * x.data * (1.0 + e)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
            x.accumulate_grad(g * (0.5 * (1.0 + e) + x.data * pdf))

    return Tensor(out_data, x.requires_grad, (x,), backward, "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Shift-invariant softmax along ``axis``."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    out_data = ex / ex.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            inner = (g * out_data).sum(axis=axis, keepdims=True)
            x.accumulate_grad(out_data * (g - inner))

    return Tensor(out_data, x.requires_grad, (x,), backward, "softmax")


def index_select(x: Tensor, idx: Sequence[int]) -> Tensor:
    """Pick rows of ``x`` in the order given; duplicates allowed."""
    idx_arr = np.asarray(idx, dtype=np.intp)
    n = x.shape[0]
    bad = idx_arr[(idx_arr < 0) | (idx_arr >= n)]
    if bad.size:
        raise IndexError(f"index_select: index {int(bad[0])} out of range for {n} rows")
    out_data = x.data[idx_arr]

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx_arr, g)
            x.accumulate_grad(gx)

    return Tensor(out_data, x.requires_grad, (x,), backward, "index_select")


def index_assign(dst: Tensor, idx: Sequence[int], src: Tensor) -> Tensor:
    """Copy of ``dst`` with rows ``idx`` replaced by the rows of ``src``.

    Indices must be distinct; gradients route to ``src`` at those rows and to
    the untouched rows of ``dst``.
    """
    idx_arr = np.asarray(idx, dtype=np.intp)
    n = dst.shape[0]
    bad = idx_arr[(idx_arr < 0) | (idx_arr >= n)]
    if bad.size:
        raise IndexError(f"index_assign: index {int(bad[0])} out of range for {n} rows")
    uniq, counts = np.unique(idx_arr, return_counts=True)
    if (counts > 1).any():
        dup = int(uniq[counts > 1][0])
        raise ValueError(f"index_assign: duplicate index {dup} makes assignment ambiguous")
    if src.shape != (len(idx_arr),) + dst.shape[1:]:
        raise ValueError(f"index_assign: source shape {src.shape} does not match {len(idx_arr)} target rows of {dst.shape}")
    out_data = dst.data.copy()
    out_data[idx_arr] = src.data

    def backward(g: np.ndarray) -> None:
        if src.requires_grad:
            src.accumulate_grad(g[idx_arr])
        if dst.requires_grad:
            gd = g.copy()
            gd[idx_arr] = 0.0
            dst.accumulate_grad(gd)

    return Tensor(out_data, _needs_grad(dst, src), (dst, src), backward, "index_assign")


def gather_rowwise(x: Tensor, cols: Sequence[int]) -> Tensor:
    """Per-row pick: out[i] = x[i, cols[i]]."""
    cols_arr = np.asarray(cols, dtype=np.intp)
    n, m = x.shape
    if cols_arr.shape != (n,):
        raise ValueError(f"gather_rowwise: need one column per row, got {cols_arr.shape} for {n} rows")
    bad = cols_arr[(cols_arr < 0) | (cols_arr >= m)]
    if bad.size:
        raise IndexError(f"gather_rowwise: column {int(bad[0])} out of range for {m} columns")
    rows = np.arange(n)
    out_data = x.data[rows, cols_arr]

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[rows, cols_arr] = g
            x.accumulate_grad(gx)

    return Tensor(out_data, x.requires_grad, (x,), backward, "gather_rowwise")


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack tensors along the row axis."""
    parts = list(parts)
    if not parts:
        raise ValueError("concat_rows: nothing to concatenate")
    widths = {p.shape[1:] for p in parts}
    if len(widths) != 1:
        raise ValueError(f"concat_rows: incompatible row shapes {sorted(widths)}")
    out_data = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g: np.ndarray) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.accumulate_grad(g[lo:hi])

    return Tensor(out_data, _needs_grad(*parts), tuple(parts), backward, "concat_rows")


def dropout(x: Tensor, p: float, rng: Rng | None = None) -> Tensor:
    """Inverted dropout; p = 0 is the identity and needs no rng."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout with p > 0 requires an rng")
    keep = (rng.uniform(x.shape) >= p) / (1.0 - p)
    out_data = x.data * keep

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(g * keep)

    return Tensor(out_data, x.requires_grad, (x,), backward, "dropout")


def tsum(x: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    out_data = x.data.sum()

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, g))

    return Tensor(out_data, x.requires_grad, (x,), backward, "sum")


class GradTape:
    """Reverse-topological record of every node reachable from a seed scalar."""

    def __init__(self, seed: Tensor):
        if seed.shape != ():
            raise ValueError(f"backward seed must be a scalar, got shape {seed.shape}")
        self.seed = seed
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(seed, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if node.tape_id in seen:
                continue
            seen.add(node.tape_id)
            stack.append((node, True))
            for parent in node._parents:
                if parent.tape_id not in seen:
                    stack.append((parent, False))


def backward(seed: Tensor) -> None:
    """Accumulate d(seed)/d(leaf) into ``grad`` of every reachable tensor."""
    tape = GradTape(seed)
    seed.accumulate_grad(np.ones((), dtype=np.float64))
    for node in reversed(tape.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def finite(*ts: Tensor) -> bool:
    return all(np.isfinite(t.data).all() for t in ts)


def parameters(*groups: Iterable[Tensor]) -> list[Tensor]:
    """Flatten tensor iterables into one parameter list."""
    out: list[Tensor] = []
    for g in groups:
        out.extend(g)
    return out
