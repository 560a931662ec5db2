"""Reverse-mode automatic differentiation over dense float tensors.

Every primitive registers a vector-Jacobian rule written in terms of other
primitives, so a gradient computed with ``higher_order=True`` is itself a
recorded graph and can be differentiated again. That is what lets the
trainer push a meta-gradient back through unrolled SGD steps without ever
forming a Hessian.

Sparse matrices (scipy CSR) only appear as constants on the left of
``spmm``; they are never differentiated.
"""

from __future__ import annotations

import contextlib
from collections import Counter
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "DiffValue",
    "NonFiniteError",
    "MissingDerivativeError",
    "VJP_RULES",
    "CATALOG",
    "stats",
    "reset_stats",
    "set_default_dtype",
    "get_default_dtype",
    "parameter",
    "constant",
    "detach",
    "gradient",
    "dropout_mask",
    "no_record",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "transpose",
    "spmm",
    "row_select",
    "row_scatter",
    "col_select",
    "col_scatter",
    "relu",
    "exp",
    "logsumexp_rows",
    "square",
    "sum_all",
    "mean",
    "fill",
    "add_rowvec",
    "sum_rows",
    "expand_rows",
    "sum_cols",
    "expand_cols",
    "concat_rows",
    "dropout",
]

_DTYPE = np.float64

# graph bookkeeping; "nodes" counts recorded (non-constant) values
stats: Counter = Counter()


def reset_stats() -> None:
    stats.clear()


def set_default_dtype(dtype) -> None:
    """Switch the payload dtype (float64 by default, float32 allowed)."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype.type


def get_default_dtype():
    return _DTYPE


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up in a forward or backward computation."""


class MissingDerivativeError(KeyError):
    pass


_RECORDING = True


@contextlib.contextmanager
def no_record():
    """Evaluate ops without recording provenance (results are constants)."""
    global _RECORDING
    prev = _RECORDING
    _RECORDING = False
    try:
        yield
    finally:
        _RECORDING = prev


class DiffValue:
    """A tensor payload plus the op and parents that produced it.

    Leaves have ``op is None``. ``requires_grad`` marks values that depend on
    at least one parameter leaf; anything else is treated as a constant and
    carries no parents.
    """

    __slots__ = ("data", "op", "parents", "ctx", "requires_grad", "name")

    def __init__(self, data, op=None, parents=(), ctx=None, requires_grad=False, name=None):
        self.data = data
        self.op = op
        self.parents = parents
        self.ctx = ctx
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        kind = "param" if (self.is_leaf and self.requires_grad) else (self.op or "const")
        return f"DiffValue({kind}, shape={self.shape})"

    # operator sugar; only same-shape arithmetic is supported
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, DiffValue):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_array(x) -> np.ndarray:
    arr = np.asarray(x, dtype=_DTYPE)
    if arr.dtype != _DTYPE:
        arr = arr.astype(_DTYPE)
    return arr


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by '{op}'")


def parameter(data, name: str | None = None) -> DiffValue:
    arr = np.array(data, dtype=_DTYPE, copy=True)
    _check_finite(arr, "parameter")
    return DiffValue(arr, requires_grad=True, name=name)


def constant(data) -> DiffValue:
    if isinstance(data, DiffValue):
        return DiffValue(data.data)
    arr = _as_array(data)
    _check_finite(arr, "constant")
    return DiffValue(arr)


def detach(v: DiffValue) -> DiffValue:
    """Same payload, no provenance; gradients stop here."""
    return DiffValue(v.data)


def _wrap(x) -> DiffValue:
    return x if isinstance(x, DiffValue) else constant(x)


def _make(op: str, data: np.ndarray, parents: Sequence[DiffValue], ctx=None) -> DiffValue:
    _check_finite(data, op)
    stats["ops"] += 1
    if _RECORDING and any(p.requires_grad for p in parents):
        stats["nodes"] += 1
        return DiffValue(data, op, tuple(parents), ctx, requires_grad=True)
    return DiffValue(data)


def _same_shape(op: str, a: DiffValue, b: DiffValue) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --- primitives -----------------------------------------------------------

def add(a, b) -> DiffValue:
    a, b = _wrap(a), _wrap(b)
    _same_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b))


def sub(a, b) -> DiffValue:
    a, b = _wrap(a), _wrap(b)
    _same_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b))


def mul(a, b) -> DiffValue:
    a, b = _wrap(a), _wrap(b)
    _same_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b))


def scale(a, c: float) -> DiffValue:
    a = _wrap(a)
    c = float(c)
    return _make("scale", a.data * c, (a,), c)


def neg(a) -> DiffValue:
    return scale(a, -1.0)


def matmul(a, b) -> DiffValue:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _make("matmul", a.data @ b.data, (a, b))


def transpose(a) -> DiffValue:
    a = _wrap(a)
    if a.data.ndim != 2:
        raise ValueError("transpose expects a matrix")
    return _make("transpose", np.ascontiguousarray(a.data.T), (a,))


def spmm(adj: sp.spmatrix, x) -> DiffValue:
    x = _wrap(x)
    if adj.shape[1] != x.shape[0]:
        raise ValueError(f"spmm: incompatible shapes {adj.shape} @ {x.shape}")
    out = np.asarray(adj @ x.data, dtype=_DTYPE)
    return _make("spmm", out, (x,), adj)


def row_select(x, index) -> DiffValue:
    x = _wrap(x)
    idx = np.asarray(index, dtype=np.int64)
    return _make("row_select", x.data[idx], (x,), (idx, x.shape[0]))


def row_scatter(g, index, num_rows: int) -> DiffValue:
    """Adjoint of ``row_select``: add rows of g into a zero matrix."""
    g = _wrap(g)
    idx = np.asarray(index, dtype=np.int64)
    out = np.zeros((num_rows,) + g.shape[1:], dtype=_DTYPE)
    np.add.at(out, idx, g.data)
    return _make("row_scatter", out, (g,), idx)


def col_select(x, index) -> DiffValue:
    x = _wrap(x)
    idx = np.asarray(index, dtype=np.int64)
    return _make("col_select", x.data[:, idx], (x,), (idx, x.shape[1]))


def col_scatter(g, index, num_cols: int) -> DiffValue:
    g = _wrap(g)
    idx = np.asarray(index, dtype=np.int64)
    out = np.zeros((g.shape[0], num_cols), dtype=_DTYPE)
    np.add.at(out.T, idx, g.data.T)
    return _make("col_scatter", out, (g,), idx)


def relu(x) -> DiffValue:
    x = _wrap(x)
    return _make("relu", np.maximum(x.data, 0.0), (x,))


def exp(x) -> DiffValue:
    x = _wrap(x)
    with np.errstate(over="ignore"):
        data = np.exp(x.data)
    return _make("exp", data, (x,))


def logsumexp_rows(x) -> DiffValue:
    """Row-wise log-sum-exp of a matrix, returned as a vector."""
    x = _wrap(x)
    if x.data.ndim != 2:
        raise ValueError("logsumexp_rows expects a matrix")
    m = x.data.max(axis=1, keepdims=True)
    out = (m + np.log(np.exp(x.data - m).sum(axis=1, keepdims=True)))[:, 0]
    return _make("logsumexp_rows", out, (x,))


def square(x) -> DiffValue:
    x = _wrap(x)
    return _make("square", x.data * x.data, (x,))


def sum_all(x) -> DiffValue:
    x = _wrap(x)
    return _make("sum", np.asarray(x.data.sum(), dtype=_DTYPE), (x,), x.shape)


def mean(x) -> DiffValue:
    x = _wrap(x)
    if x.data.size == 0:
        raise ValueError("mean of empty tensor")
    return scale(sum_all(x), 1.0 / x.data.size)


def fill(s, shape) -> DiffValue:
    """Broadcast a scalar to ``shape``."""
    s = _wrap(s)
    if s.data.size != 1:
        raise ValueError("fill expects a scalar")
    shape = tuple(shape)
    return _make("fill", np.full(shape, s.data.reshape(()), dtype=_DTYPE), (s,), shape)


def add_rowvec(x, b) -> DiffValue:
    """x[n, c] + b[c] broadcast over rows (bias addition)."""
    x, b = _wrap(x), _wrap(b)
    if x.data.ndim != 2 or b.shape != (x.shape[1],):
        raise ValueError(f"add_rowvec: shapes {x.shape} and {b.shape}")
    return _make("add_rowvec", x.data + b.data, (x, b))


def sum_rows(x) -> DiffValue:
    """Sum over axis 0: [n, c] -> [c]."""
    x = _wrap(x)
    return _make("sum_rows", x.data.sum(axis=0), (x,), x.shape[0])


def expand_rows(v, n: int) -> DiffValue:
    """[c] -> [n, c] by repeating the vector on every row."""
    v = _wrap(v)
    return _make("expand_rows", np.broadcast_to(v.data, (n,) + v.shape).copy(), (v,))


def sum_cols(x) -> DiffValue:
    """Sum over axis 1: [n, c] -> [n]."""
    x = _wrap(x)
    return _make("sum_cols", x.data.sum(axis=1), (x,), x.shape[1])


def expand_cols(v, c: int) -> DiffValue:
    """[n] -> [n, c] by repeating each entry along its row."""
    v = _wrap(v)
    return _make("expand_cols", np.repeat(v.data[:, None], c, axis=1), (v,))


def concat_rows(parts: Sequence) -> DiffValue:
    parts = [_wrap(p) for p in parts]
    if not parts:
        raise ValueError("concat_rows of nothing")
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=0)
    return _make("concat_rows", out, tuple(parts), offsets)


def dropout(x, mask: np.ndarray) -> DiffValue:
    """Multiply by a pregenerated {0, 1/(1-rate)} mask."""
    return mul(x, constant(mask))


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape, dtype=_DTYPE)
    keep = rng.random(shape) >= rate
    return keep.astype(_DTYPE) / (1.0 - rate)


# --- vector-Jacobian rules (expressed with the primitives above) -----------

def _vjp_add(out, g):
    return g, g


def _vjp_sub(out, g):
    return g, neg(g)


def _vjp_mul(out, g):
    a, b = out.parents
    return mul(g, b), mul(g, a)


def _vjp_scale(out, g):
    return (scale(g, out.ctx),)


def _vjp_matmul(out, g):
    a, b = out.parents
    return matmul(g, transpose(b)), matmul(transpose(a), g)


def _vjp_transpose(out, g):
    return (transpose(g),)


def _vjp_spmm(out, g):
    return (spmm(out.ctx.T.tocsr(), g),)


def _vjp_row_select(out, g):
    idx, n = out.ctx
    return (row_scatter(g, idx, n),)


def _vjp_row_scatter(out, g):
    return (row_select(g, out.ctx),)


def _vjp_col_select(out, g):
    idx, c = out.ctx
    return (col_scatter(g, idx, c),)


def _vjp_col_scatter(out, g):
    return (col_select(g, out.ctx),)


def _vjp_relu(out, g):
    (x,) = out.parents
    # the step function is locally constant, so its own derivative is zero
    return (mul(g, constant((x.data > 0).astype(_DTYPE))),)


def _vjp_exp(out, g):
    return (mul(g, out),)


def _vjp_logsumexp_rows(out, g):
    (x,) = out.parents
    c = x.shape[1]
    softmax = exp(sub(x, expand_cols(out, c)))
    return (mul(expand_cols(g, c), softmax),)


def _vjp_square(out, g):
    (x,) = out.parents
    return (scale(mul(g, x), 2.0),)


def _vjp_sum(out, g):
    return (fill(g, out.ctx),)


def _vjp_fill(out, g):
    return (sum_all(g),)


def _vjp_add_rowvec(out, g):
    return g, sum_rows(g)


def _vjp_sum_rows(out, g):
    return (expand_rows(g, out.ctx),)


def _vjp_expand_rows(out, g):
    return (sum_rows(g),)


def _vjp_sum_cols(out, g):
    return (expand_cols(g, out.ctx),)


def _vjp_expand_cols(out, g):
    return (sum_cols(g),)


def _vjp_concat_rows(out, g):
    offs = out.ctx
    return tuple(row_select(g, np.arange(offs[k], offs[k + 1])) for k in range(len(offs) - 1))


VJP_RULES: dict[str, Callable] = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "scale": _vjp_scale,
    "matmul": _vjp_matmul,
    "transpose": _vjp_transpose,
    "spmm": _vjp_spmm,
    "row_select": _vjp_row_select,
    "row_scatter": _vjp_row_scatter,
    "col_select": _vjp_col_select,
    "col_scatter": _vjp_col_scatter,
    "relu": _vjp_relu,
    "exp": _vjp_exp,
    "logsumexp_rows": _vjp_logsumexp_rows,
    "square": _vjp_square,
    "sum": _vjp_sum,
    "fill": _vjp_fill,
    "add_rowvec": _vjp_add_rowvec,
    "sum_rows": _vjp_sum_rows,
    "expand_rows": _vjp_expand_rows,
    "sum_cols": _vjp_sum_cols,
    "expand_cols": _vjp_expand_cols,
    "concat_rows": _vjp_concat_rows,
}

CATALOG = tuple(VJP_RULES)


# --- backward pass --------------------------------------------------------

def _relevant_nodes(objective: DiffValue, targets: set[int]) -> list[DiffValue]:
    """Nodes on some path from a target to the objective, in topological order."""
    order: list[DiffValue] = []
    reaches: dict[int, bool] = {}
    stack: list[tuple[DiffValue, bool]] = [(objective, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            hit = key in targets or any(reaches.get(id(p), False) for p in node.parents)
            reaches[key] = hit
            if hit:
                order.append(node)
            continue
        if key in reaches:
            continue
        reaches[key] = False  # provisional; graph is acyclic
        stack.append((node, True))
        if key in targets and node.is_leaf:
            continue
        for p in node.parents:
            if p.requires_grad and id(p) not in reaches:
                stack.append((p, False))
    return order


def gradient(objective: DiffValue, wrt: Sequence[DiffValue], higher_order: bool = False) -> list[DiffValue]:
    """Return d(objective)/d(w) for every w in ``wrt``.

    With ``higher_order`` the returned values are recorded graph nodes and
    can be differentiated again; otherwise they are constants. Entries of
    ``wrt`` the objective does not depend on get an exact zero.
    """
    if objective.data.size != 1 or objective.data.ndim > 1:
        raise ValueError(f"gradient needs a scalar objective, got shape {objective.shape}")
    targets = {id(w) for w in wrt}
    zeros = [constant(np.zeros(w.shape, dtype=_DTYPE)) for w in wrt]
    if not objective.requires_grad:
        return zeros

    stats["backward_calls"] += 1
    if higher_order:
        stats["higher_order_calls"] += 1

    ctx = contextlib.nullcontext() if higher_order else no_record()
    with ctx:
        order = _relevant_nodes(objective, targets)
        adjoint: dict[int, DiffValue] = {id(objective): constant(np.ones(objective.shape, dtype=_DTYPE))}
        for node in reversed(order):
            g = adjoint.get(id(node))
            if g is None or node.is_leaf:
                continue
            rule = VJP_RULES.get(node.op)
            if rule is None:
                raise MissingDerivativeError(f"no derivative rule for '{node.op}'")
            try:
                grads = rule(node, g)
            except NonFiniteError as exc:
                raise NonFiniteError(f"backward through '{node.op}': {exc}") from None
            for parent, pg in zip(node.parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                prev = adjoint.get(id(parent))
                adjoint[id(parent)] = pg if prev is None else add(prev, pg)

    out = []
    for w, z in zip(wrt, zeros):
        g = adjoint.get(id(w))
        out.append(z if g is None else (g if higher_order else detach(g)))
    return out


def graph_size(roots: Iterable[DiffValue]) -> int:
    """Number of distinct recorded nodes reachable from ``roots``."""
    seen: set[int] = set()
    stack = [r for r in roots if r.requires_grad]
    while stack:
        n = stack.pop()
        if id(n) in seen:
            continue
        seen.add(id(n))
        stack.extend(p for p in n.parents if p.requires_grad)
    return len(seen)
