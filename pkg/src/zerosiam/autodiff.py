"""Minimal reverse-mode automatic differentiation over float64 arrays.

Every op records a node carrying its inputs and a backward closure. Nodes are
stamped with a monotonically increasing sequence number; ``backward`` walks the
reachable nodes in reverse recording order, visiting each once.

Broadcasting is limited to adding/multiplying a 1-D ``[n]`` operand row-wise
onto a ``[b, n]`` operand.
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence

import numpy as np

LOG_EPS = 1e-12

_seq = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ValueError):
    """An op received non-finite input."""


class ContractError(ValueError):
    """A caller violated an op precondition."""


class Node:
    __slots__ = ("seq", "op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.seq = next(_seq)
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


class Tensor:
    """Dense float64 array that may participate in a computation graph."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.node = Node(op, inputs, backward_fn) if out.requires_grad else None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    # only the row-wise [b, n] op [n] case is supported
    return g.sum(axis=0).reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return
    if b.data.ndim == 2 and a.data.ndim == 1 and b.shape[1] == a.shape[0]:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, "add", (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, "sub", (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, "mul", (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        _accumulate(a, g * c)

    return _make(a.data * c, "scale", (a,), bw)


def log(a: Tensor, eps: float = LOG_EPS) -> Tensor:
    """``log(max(a, eps))``; the gradient is zero where the clamp is active."""
    clamped = np.maximum(a.data, eps)
    live = a.data > eps

    def bw(g):
        _accumulate(a, np.where(live, g / clamped, 0.0))

    return _make(np.log(clamped), "log", (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        _accumulate(a, g * out)

    return _make(out, "exp", (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        _accumulate(a, g * mask)

    # np.maximum propagates NaN, so a poisoned input stays visible downstream
    return _make(np.maximum(a.data, 0.0), "relu", (a,), bw)


# ---------------------------------------------------------------- reductions


def sum(a: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    """Full sum (scalar) or, with ``axis=1``, a per-row sum of a 2-D tensor."""
    if axis is None:
        def bw(g):
            _accumulate(a, np.broadcast_to(g, a.shape))

        return _make(np.array(a.data.sum()), "sum", (a,), bw)
    if axis != 1 or a.data.ndim != 2:
        raise ShapeError(f"sum: axis={axis} unsupported for shape {a.shape}")

    def bw_rows(g):
        _accumulate(a, np.broadcast_to(g[:, None], a.shape))

    return _make(a.data.sum(axis=1), "row_sum", (a,), bw_rows)


def row_sum(a: Tensor) -> Tensor:
    return sum(a, axis=1)


def mean(a: Tensor) -> Tensor:
    n = a.size
    if n == 0:
        raise ShapeError("mean of empty tensor")

    def bw(g):
        _accumulate(a, np.broadcast_to(g / n, a.shape))

    return _make(np.array(a.data.mean()), "mean", (a,), bw)


def l2_norm(a: Tensor, axis: Optional[int] = None) -> Tensor:
    """Euclidean norm of all entries, or of each row with ``axis=1``."""
    if axis is None:
        n = float(np.sqrt((a.data**2).sum()))

        def bw(g):
            _accumulate(a, g * a.data / n if n > 0 else np.zeros_like(a.data))

        return _make(np.array(n), "l2_norm", (a,), bw)
    if axis != 1 or a.data.ndim != 2:
        raise ShapeError(f"l2_norm: axis={axis} unsupported for shape {a.shape}")
    norms = np.sqrt((a.data**2).sum(axis=1))
    safe = np.where(norms > 0, norms, 1.0)

    def bw_rows(g):
        _accumulate(a, (g / safe)[:, None] * a.data)

    return _make(norms, "row_l2_norm", (a,), bw_rows)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _make(a.data @ b.data, "matmul", (a, b), bw)


def softmax(u: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction."""
    if u.data.ndim != 2 or u.shape[1] < 2:
        raise ShapeError(f"softmax expects [b, C] with C >= 2, got {u.shape}")
    if not np.all(np.isfinite(u.data)):
        raise NumericError("softmax: non-finite logits")
    shifted = u.data - u.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        inner = (g * p).sum(axis=1, keepdims=True)
        _accumulate(u, p * (g - inner))

    return _make(p, "softmax", (u,), bw)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization ``(x - mean) / sqrt(var + eps)`` without affine terms."""
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm expects [b, d], got {x.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=1, keepdims=True)
        gx = (g * xhat).mean(axis=1, keepdims=True)
        _accumulate(x, inv * (g - gm - xhat * gx))

    return _make(xhat, "layer_norm", (x,), bw)


def stop_gradient(t: Tensor) -> Tensor:
    """Same values, detached from the graph."""
    out = Tensor.__new__(Tensor)
    out.data = t.data.copy()
    out.requires_grad = False
    out.grad = None
    out.node = None
    out.name = None
    return out


detach = stop_gradient


# ---------------------------------------------------------------- backward


def _reachable(root: Tensor) -> list:
    seen = set()
    nodes = []
    stack = [root]
    while stack:
        t = stack.pop()
        node = t.node
        if node is None or id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append((node, t))
        stack.extend(node.inputs)
    return nodes


def backward(loss: Tensor, on_visit: Optional[Callable[[Node], None]] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients accumulate across calls until cleared. ``on_visit`` is called with
    each node as it is processed, in reverse recording order.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            _accumulate(loss, np.ones_like(loss.data))
        return
    nodes = _reachable(loss)
    nodes.sort(key=lambda nt: nt[0].seq, reverse=True)
    # interior gradients live here so that only leaves keep .grad afterwards
    grads = {id(loss): np.ones_like(loss.data)}
    for node, out in nodes:
        g = grads.pop(id(out), None)
        if g is None:
            continue
        if on_visit is not None:
            on_visit(node)
        staged = list({id(t): t for t in node.inputs if t.node is not None}.values())
        # route interior contributions through the dict; leaves accumulate directly
        saved = {id(t): t.grad for t in staged}
        for t in staged:
            t.grad = None
        node.backward_fn(g)
        for t in staged:
            contrib = t.grad
            t.grad = saved[id(t)]
            if contrib is None:
                continue
            if id(t) in grads:
                grads[id(t)] = grads[id(t)] + contrib
            else:
                grads[id(t)] = contrib
