"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation returns a fresh ``Tensor`` and, when any input requires a
gradient, records the closure that pushes gradients back to its parents.
Graphs are acyclic by construction; ``backward`` walks one topological
order and visits each node exactly once, so running it twice on the same
graph produces bit-identical gradients.

All values are float64 and row-major. Any op that produces NaN or Inf
raises ``NonFiniteError`` immediately instead of letting the poison spread.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""

    def __init__(self, op: str):
        super().__init__(f"non-finite values produced by op '{op}'")
        self.op = op


def _checked(data: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(data).all():
        raise NonFiniteError(op)
    return data


class Tensor:
    """A dense float64 value plus reverse-mode bookkeeping.

    ``data`` is a C-contiguous float64 ndarray. ``grad`` accumulates the
    gradient of the current backward root with respect to this node; it is
    reset at the start of every ``backward`` call.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_push")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        op: str = "leaf",
        parents: tuple = (),
        push: Optional[Callable[[np.ndarray], None]] = None,
    ):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op = op
        self.parents = parents
        self._push = push

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False, op="const")


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, op="param")


def _result(data: np.ndarray, op: str, parents: tuple, push) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, op=op, parents=parents, push=push)
    return Tensor(data, False, op=op)


def _acc(t: Tensor, g: np.ndarray) -> None:
    # accumulators are only ever rebound (never mutated in place), so the
    # first contribution may alias the child's grad safely
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _topo(root: Tensor) -> list:
    """Topological order (parents before children), nodes requiring grad only."""
    order: list[Tensor] = []
    visited = {id(root)}
    stack: list[tuple[Tensor, object]] = [(root, iter(root.parents))]
    while stack:
        node, it = stack[-1]
        advanced = False
        for p in it:
            if p.requires_grad and id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p.parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def backward(root: Tensor, seed=None) -> None:
    """Reverse sweep from ``root``. Resets every reachable accumulator first.

    ``seed`` defaults to ones; pass an array of ``root.shape`` to extract
    arbitrary vector-Jacobian products (used by ``linalg.jacobian``).
    """
    order = _topo(root)
    for t in order:
        t.grad = None
    if seed is None:
        root.grad = np.ones_like(root.data)
    else:
        root.grad = np.asarray(seed, dtype=np.float64).reshape(root.data.shape).copy()
    for t in reversed(order):
        if t._push is not None and t.grad is not None:
            t._push(t.grad)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = _checked(a.data + b.data, "add")

    def push(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    return _result(data, "add", (a, b), push)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = _checked(a.data - b.data, "sub")

    def push(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(-g, b.data.shape))

    return _result(data, "sub", (a, b), push)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = _checked(a.data * b.data, "mul")

    def push(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _result(data, "mul", (a, b), push)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    data = _checked(a.data * c, "scale")

    def push(g):
        _acc(a, g * c)

    return _result(data, "scale", (a,), push)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul expects tensors with ndim >= 2")
    data = _checked(a.data @ b.data, "matmul")

    def push(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _result(data, "matmul", (a, b), push)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def push(g):
        _acc(a, g * (a.data > 0.0))

    return _result(data, "relu", (a,), push)


# ---------------------------------------------------------------------------
# normalizations
# ---------------------------------------------------------------------------


def softmax(a: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = _checked(e / e.sum(axis=-1, keepdims=True), "softmax")

    def push(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        _acc(a, (g - dot) * data)

    return _result(data, "softmax", (a,), push)


def log_softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = _checked(shifted - lse, "log_softmax")

    def push(g):
        soft = np.exp(data)
        _acc(a, g - soft * g.sum(axis=-1, keepdims=True))

    return _result(data, "log_softmax", (a,), push)


LAYER_NORM_EPS = 1e-5


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    The epsilon sits under the square root, so a constant input vector maps
    to exactly zero before the affine transform.
    """
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    data = _checked(y * gamma.data + beta.data, "layer_norm")

    def push(g):
        if x.requires_grad:
            dy = g * gamma.data
            m1 = dy.mean(axis=-1, keepdims=True)
            m2 = (dy * y).mean(axis=-1, keepdims=True)
            _acc(x, inv * (dy - m1 - y * m2))
        if gamma.requires_grad:
            _acc(gamma, _unbroadcast(g * y, gamma.data.shape))
        if beta.requires_grad:
            _acc(beta, _unbroadcast(g, beta.data.shape))

    return _result(data, "layer_norm", (x, gamma, beta), push)


# ---------------------------------------------------------------------------
# indexing and shape
# ---------------------------------------------------------------------------


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` (vocab, d) by an integer id array."""
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() >= table.data.shape[0]:
        raise IndexError("embedding id out of range")
    data = table.data[ids]

    def push(g):
        if table.requires_grad:
            acc = np.zeros_like(table.data)
            np.add.at(acc, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
            _acc(table, acc)

    return _result(data, "embedding_lookup", (table,), push)


def gather_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one entry along the last axis per leading position."""
    idx = np.asarray(idx)
    expanded = idx[..., None]
    data = np.take_along_axis(a.data, expanded, axis=-1)[..., 0]

    def push(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            np.put_along_axis(acc, expanded, g[..., None], axis=-1)
            _acc(a, acc)

    return _result(data, "gather_last", (a,), push)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    data = a.data.reshape(shape)

    def push(g):
        _acc(a, g.reshape(a.data.shape))

    return _result(data, "reshape", (a,), push)


def transpose(a: Tensor, axes: tuple) -> Tensor:
    data = np.ascontiguousarray(np.transpose(a.data, axes))
    inverse = np.argsort(axes)

    def push(g):
        _acc(a, np.ascontiguousarray(np.transpose(g, inverse)))

    return _result(data, "transpose", (a,), push)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum())

    def push(g):
        _acc(a, np.broadcast_to(g, a.data.shape).copy())

    return _result(data, "sum_all", (a,), push)


def sum_last(a: Tensor) -> Tensor:
    data = a.data.sum(axis=-1)

    def push(g):
        _acc(a, np.broadcast_to(g[..., None], a.data.shape).copy())

    return _result(data, "sum_last", (a,), push)


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------


def dropout_mask(shape: tuple, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted-dropout mask: entries are 0 with probability p, else 1/(1-p).

    Multiplying by the mask keeps activations unbiased at train time, so
    evaluation applies no compensation at all.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    keep = (rng.random(shape) >= p).astype(np.float64)
    return constant(keep / (1.0 - p))


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    return mul(a, dropout_mask(a.data.shape, p, rng))
