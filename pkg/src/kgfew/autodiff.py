"""Minimal reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps a float64 ndarray and records the operation that produced
it; `backward` replays the tape in reverse topological order.  Only the
operations needed by the encoder/decoder, the mask objectives and the
training losses are provided.  Everything is single-threaded numpy, so
gradients are bit-reproducible run to run.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward_fn", "requires_grad")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward_fn: Callable[[np.ndarray], None] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents if requires_grad else ()
        self._backward_fn = backward_fn if requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor({self.data!r}, requires_grad={self.requires_grad})"

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis=axis)

    def mean(self):
        return tmean(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    """A leaf tensor that participates in gradients."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _make(data, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires, parents=parents, backward_fn=backward_fn)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            if b.data.ndim == 1:
                a._accumulate(np.outer(g, b.data) if a.data.ndim == 2 else g * b.data)
            else:
                a._accumulate(g @ b.data.T)
        if b.requires_grad:
            if a.data.ndim == 1:
                b._accumulate(np.outer(a.data, g) if b.data.ndim == 2 else g * a.data)
            else:
                b._accumulate(a.data.T @ g)

    return _make(out_data, (a, b), backward)


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())

    return _make(out_data, (a,), backward)


def tmean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return mul(tsum(a), 1.0 / n)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.empty_like(a.data)
    pos = a.data >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out_data[~pos] = ez / (1.0 + ez)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(out_data, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data)

    return _make(out_data, (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 / out_data)

    return _make(out_data, (a,), backward)


def xlogx(a) -> Tensor:
    """x * ln(x) with the 0 * ln(0) := 0 convention (entropy building block)."""
    a = as_tensor(a)
    positive = a.data > 0
    out_data = np.zeros_like(a.data)
    out_data[positive] = a.data[positive] * np.log(a.data[positive])

    def backward(g):
        if a.requires_grad:
            local = np.zeros_like(a.data)
            local[positive] = np.log(a.data[positive]) + 1.0
            a._accumulate(g * local)

    return _make(out_data, (a,), backward)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes through only inside the interval."""
    a = as_tensor(a)
    out_data = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * inside)

    return _make(out_data, (a,), backward)


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    out_data = np.where(take_a, a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * take_a, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * (~take_a), b.data.shape))

    return _make(out_data, (a, b), backward)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data
    out_data = np.where(take_a, a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * take_a, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * (~take_a), b.data.shape))

    return _make(out_data, (a, b), backward)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(start, stop)
                p._accumulate(g[tuple(index)])

    return _make(out_data, tuple(parts), backward)


def gather_rows(a, idx: np.ndarray) -> Tensor:
    """a[idx] along axis 0 for an integer index array."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out_data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            np.add.at(acc, idx, g)
            a._accumulate(acc)

    return _make(out_data, (a,), backward)


def gather2d(a, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """a[rows, cols] for paired integer index arrays."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out_data = a.data[rows, cols]

    def backward(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            np.add.at(acc, (rows, cols), g)
            a._accumulate(acc)

    return _make(out_data, (a,), backward)


def segment_sum(a, segments: np.ndarray, n_segments: int) -> Tensor:
    """Sum rows of `a` into `n_segments` buckets given per-row segment ids."""
    a = as_tensor(a)
    segments = np.asarray(segments, dtype=np.int64)
    out_shape = (n_segments,) + a.data.shape[1:]
    out_data = np.zeros(out_shape, dtype=np.float64)
    np.add.at(out_data, segments, a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g[segments])

    return _make(out_data, (a,), backward)


def amax0(a) -> Tensor:
    """Max over axis 0; gradient flows to the first attaining row per column."""
    a = as_tensor(a)
    arg = np.argmax(a.data, axis=0)
    out_data = np.max(a.data, axis=0)

    def backward(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            cols = np.arange(a.data.shape[1]) if a.data.ndim == 2 else ()
            if a.data.ndim == 2:
                acc[arg, cols] = g
            else:
                acc[arg] = g
            a._accumulate(acc)

    return _make(out_data, (a,), backward)


def pair_max_adjacency(m, u: np.ndarray, v: np.ndarray, n_nodes: int) -> Tensor:
    """Dense symmetric soft adjacency from edge weights.

    A[i, j] = A[j, i] = max over parallel edges between i and j of their
    weight; cells with no edge stay 0.  The gradient flows to the first
    edge attaining the max on each pair.
    """
    m = as_tensor(m)
    u = np.asarray(u, dtype=np.int64)
    v = np.asarray(v, dtype=np.int64)
    out_data = np.zeros((n_nodes, n_nodes), dtype=np.float64)
    winner: dict[tuple[int, int], int] = {}
    for e in range(len(u)):
        i, j = (u[e], v[e]) if u[e] <= v[e] else (v[e], u[e])
        key = (int(i), int(j))
        best = winner.get(key)
        if best is None or m.data[e] > m.data[best]:
            winner[key] = e
    for (i, j), e in winner.items():
        out_data[i, j] = m.data[e]
        out_data[j, i] = m.data[e]

    def backward(g):
        if m.requires_grad:
            acc = np.zeros_like(m.data)
            for (i, j), e in winner.items():
                acc[e] += g[i, j]
                if i != j:
                    acc[e] += g[j, i]
            m._accumulate(acc)

    return _make(out_data, (m,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.data.shape))

    return _make(out_data, (a,), backward)


def broadcast_rows(a, n_rows: int) -> Tensor:
    """Repeat a 1-D tensor as n_rows identical rows."""
    a = as_tensor(a)
    out_data = np.broadcast_to(a.data, (n_rows,) + a.data.shape).copy()

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.sum(axis=0))

    return _make(out_data, (a,), backward)


def dot(a, b) -> Tensor:
    return tsum(mul(a, b))


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Populate .grad on every tensor the scalar `root` depends on."""
    if root.data.size != 1:
        raise ValueError("backward target must be a scalar")
    order = _toposort(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


def value_and_grad(f: Callable[[], Tensor], wrt) -> tuple[float, "np.ndarray | list[np.ndarray]"]:
    """Evaluate f() and return (scalar value, gradients of the wrt leaves).

    `wrt` is a Tensor or a sequence of Tensors with requires_grad set.
    Leaves the computation never touches get zero gradients.
    """
    single = isinstance(wrt, Tensor)
    leaves: list[Tensor] = [wrt] if single else list(wrt)
    for leaf in leaves:
        if not isinstance(leaf, Tensor) or not leaf.requires_grad:
            raise ValueError("wrt leaves must be Tensors with requires_grad=True")
    out = f()
    if not isinstance(out, Tensor):
        raise ValueError("f must return a Tensor")
    if out.data.size != 1:
        raise ValueError("f must return a scalar")
    for leaf in leaves:
        leaf.grad = None
    if out.requires_grad:
        backward(out)
    grads = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]
    value = float(out.data)
    return (value, grads[0]) if single else (value, grads)
