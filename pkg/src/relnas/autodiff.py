"""Reverse-mode automatic differentiation over dense numpy tensors.

Tensors are eager: every operation computes its value immediately with
numpy. When a ComputeGraph is active (used as a context manager), operations
whose inputs are gradient-tracked additionally record a node on the graph's
tape, in creation order. ``graph.backward(loss)`` walks the tape in exact
reverse creation order and accumulates gradients into ``Tensor.grad``.

Outside any active graph the same code runs without recording, which is the
evaluation fast path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class ContractViolation(ValueError):
    """An operation was called outside its documented contract."""


class NumericFailure(ArithmeticError):
    """A non-finite value was produced where a finite one is required."""


class GraphConsumed(RuntimeError):
    """backward() was called twice on the same graph without a re-forward."""


def _is_finite(arr: np.ndarray) -> bool:
    # A single-pass reduction: any nan/inf poisons the sum.
    s = float(np.sum(arr))
    return s == s and abs(s) != math.inf


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Dense n-dimensional value array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            # numpy scalars (e.g. from full reductions) keep their dtype;
            # python numbers and lists default to double
            if isinstance(data, (np.ndarray, np.generic)):
                self.data = np.asarray(data)
            else:
                self.data = np.asarray(data, dtype=DEFAULT_DTYPE)
        else:
            self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Run backward on the innermost active graph with self as the loss."""
        g = _active_graph()
        if g is None:
            raise ContractViolation("backward() requires an active ComputeGraph")
        g.backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar. The second operand may be a scalar, which is promoted
    # to a constant tensor of matching dtype.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_as_tensor(other, like=self), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_as_tensor(other, like=self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, like=self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow_scalar(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


class Parameter(Tensor):
    """A named, gradient-tracked leaf tensor."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


class _Node:
    __slots__ = ("out", "parents", "backward_fn", "op")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], backward_fn, op: str):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op


_GRAPH_STACK: list["ComputeGraph"] = []


def _active_graph() -> "ComputeGraph | None":
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


class ComputeGraph:
    """Tape of primitive operations, ordered by creation.

    Parents of node i always precede i on the tape, so reverse creation
    order is a valid reverse-topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "ComputeGraph":
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _GRAPH_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        """Populate grads of every tracked leaf reachable from ``loss``."""
        if self._consumed:
            raise GraphConsumed(
                "backward already ran on this graph; re-run the forward pass first"
            )
        if loss.data.size != 1:
            raise ContractViolation(f"loss must be scalar, got shape {loss.shape}")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for idx in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[idx]
            g_out = node.out.grad
            if g_out is None:
                continue
            parent_grads = node.backward_fn(g_out)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if not _is_finite(pg):
                    raise NumericFailure(
                        f"non-finite gradient at node {idx} ({node.op})"
                    )
                parent.grad = pg if parent.grad is None else parent.grad + pg


def backward(graph: ComputeGraph, loss: Tensor) -> None:
    """Functional form of ``graph.backward(loss)``."""
    graph.backward(loss)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    g = _active_graph()
    if g is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        g.nodes.append(_Node(out, parents, backward_fn, op))
    return out


# --------------------------------------------------------------------------
# Elementwise arithmetic
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)

    def bwd(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data + b.data, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)

    def bwd(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data - b.data, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)

    def bwd(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bwd, "mul")


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data / b.data, (a, b), bwd, "div")


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        return (-g,)

    return _make(-a.data, (a,), bwd, "neg")


def pow_scalar(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)

    def bwd(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _make(a.data ** exponent, (a,), bwd, "pow")


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; on ties the gradient is split evenly."""
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out_data = np.maximum(a.data, b.data)

    def bwd(g):
        a_wins = (a.data > b.data).astype(g.dtype)
        b_wins = (b.data > a.data).astype(g.dtype)
        tie = 1.0 - a_wins - b_wins
        ga = _unbroadcast(g * (a_wins + 0.5 * tie), a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * (b_wins + 0.5 * tie), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out_data, (a, b), bwd, "maximum")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient passes through the interior only."""
    out_data = np.clip(a.data, lo, hi)

    def bwd(g):
        inside = ((a.data >= lo) & (a.data <= hi)).astype(g.dtype)
        return (g * inside,)

    return _make(out_data, (a,), bwd, "clamp")


# --------------------------------------------------------------------------
# Nonlinearities
# --------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    def bwd(g):
        return (g * (a.data > 0),)

    return _make(np.maximum(a.data, 0), (a,), bwd, "relu")


def abs_(a: Tensor) -> Tensor:
    def bwd(g):
        return (g * np.sign(a.data),)

    return _make(np.abs(a.data), (a,), bwd, "abs")


def sigmoid(a: Tensor) -> Tensor:
    # Stable in both tails.
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g):
        return (g * out_data * (1.0 - out_data),)

    return _make(out_data, (a,), bwd, "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out_data * out_data),)

    return _make(out_data, (a,), bwd, "tanh")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        return (g * out_data,)

    return _make(out_data, (a,), bwd, "exp")


def log(a: Tensor) -> Tensor:
    def bwd(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), bwd, "log")


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def bwd(g):
        return (g * 0.5 / out_data,)

    return _make(out_data, (a,), bwd, "sqrt")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / np.sum(e, axis=axis, keepdims=True)

    def bwd(g):
        dot = np.sum(g * out_data, axis=axis, keepdims=True)
        return (out_data * (g - dot),)

    return _make(out_data, (a,), bwd, "softmax")


# --------------------------------------------------------------------------
# Linear algebra and reductions
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolation("matmul requires operands with ndim >= 2")

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # stacked @ matrix: one flat GEMM instead of a batched loop
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            else:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), bwd, "matmul")


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bwd(g):
        return (_expand_reduced(g, a.shape, axis, keepdims),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bwd, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]

    def bwd(g):
        return (_expand_reduced(g, a.shape, axis, keepdims) / count,)

    return _make(np.mean(a.data, axis=axis, keepdims=keepdims), (a,), bwd, "mean")


# --------------------------------------------------------------------------
# Shape manipulation
# --------------------------------------------------------------------------

def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bwd(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape), (a,), bwd, "reshape")


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return _make(a.data.transpose(axes), (a,), bwd, "transpose")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    key = [slice(None)] * a.ndim
    key[axis] = slice(start, start + length)
    key = tuple(key)

    def bwd(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[key] = g
        return (full,)

    return _make(a.data[key], (a,), bwd, "narrow")


def pad_axis(a: Tensor, axis: int, before: int, after: int, value: float = 0.0) -> Tensor:
    width = [(0, 0)] * a.ndim
    width[axis] = (before, after)
    key = [slice(None)] * a.ndim
    key[axis] = slice(before, before + a.shape[axis])
    key = tuple(key)

    def bwd(g):
        return (g[key],)

    return _make(np.pad(a.data, width, constant_values=value), (a,), bwd, "pad")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        outs = []
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                key = [slice(None)] * g.ndim
                key[axis] = slice(start, stop)
                outs.append(g[tuple(key)])
            else:
                outs.append(None)
        return tuple(outs)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd, "concat")


def stack(tensors: Sequence[Tensor], axis: int) -> Tensor:
    """Stack along a new axis, built from reshape + concat."""
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else axis + t.ndim + 1, 1)
        expanded.append(reshape(t, tuple(shape)))
    return concat(expanded, axis=axis)


def embedding_rows(table: Tensor, flat_ids: np.ndarray, out_rows: np.ndarray,
                   out_shape: tuple[int, ...]) -> Tensor:
    """Scatter-sum of table rows.

    Row ``flat_ids[j]`` of the table is accumulated into flat output row
    ``out_rows[j]``. Output is reshaped to ``out_shape``, whose last
    dimension must equal the embedding width.
    """
    emb = table.shape[1]
    n_rows = 1
    for d in out_shape[:-1]:
        n_rows *= d
    flat = np.zeros((n_rows, emb), dtype=table.data.dtype)
    if flat_ids.size:
        np.add.at(flat, out_rows, table.data[flat_ids])

    def bwd(g):
        if not table.requires_grad:
            return (None,)
        g2 = g.reshape(n_rows, emb)
        gt = np.zeros(table.shape, dtype=g.dtype)
        if flat_ids.size:
            np.add.at(gt, flat_ids, g2[out_rows])
        return (gt,)

    return _make(flat.reshape(out_shape), (table,), bwd, "embedding_rows")


# --------------------------------------------------------------------------
# Gradient verification
# --------------------------------------------------------------------------

@dataclass
class FiniteDiffReport:
    max_rel_error: float
    worst_index: tuple[int, ...]
    passed: bool
    tol: float

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"finite-diff {status}: max rel err {self.max_rel_error:.3e} at {self.worst_index} (tol {self.tol:g})"


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      eps: float = 1e-5, tol: float = 1e-4) -> FiniteDiffReport:
    """Compare the analytic gradient of ``f`` at ``x`` against central differences.

    ``f`` must return a scalar tensor and must read ``x`` itself (not a
    copy). The relative error at each coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ContractViolation(f"eps {eps} outside [1e-7, 1e-3]")
    x.requires_grad = True
    saved_grad = x.grad
    x.grad = None
    with ComputeGraph() as g:
        y = f(x)
        if not _is_finite(y.data):
            raise NumericFailure("f(x) is non-finite")
        g.backward(y)
    if x.grad is None:
        analytic = np.zeros_like(x.data)
    else:
        analytic = np.array(x.grad, dtype=np.float64, copy=True)
    x.grad = saved_grad

    numeric = np.zeros_like(analytic)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        y_plus = float(f(x).data)
        flat[i] = orig - eps
        y_minus = float(f(x).data)
        flat[i] = orig
        if not (math.isfinite(y_plus) and math.isfinite(y_minus)):
            raise NumericFailure(f"f(x) non-finite while perturbing coordinate {i}")
        numeric.reshape(-1)[i] = (y_plus - y_minus) / (2.0 * eps)

    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    worst = int(np.argmax(rel))
    max_rel = float(rel.reshape(-1)[worst])
    return FiniteDiffReport(
        max_rel_error=max_rel,
        worst_index=np.unravel_index(worst, x.shape) if x.ndim else (),
        passed=max_rel <= tol,
        tol=tol,
    )
