"""Small tape-based reverse-mode autodiff over numpy float64 arrays.

Every operation builds a node holding its value, its parents and a closure
that pushes the incoming gradient to the parents.  Graphs are tiny (a few
hundred nodes per training batch), so a plain Python tape is fast enough and
keeps the arithmetic bit-reproducible: all reductions are numpy reductions
over fixed operand orders, and nothing here is threaded.

Nodes whose inputs all have ``requires_grad=False`` are collapsed into
constants, so frozen-model evaluation pays no tape overhead.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    # sum out prepended axes
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A value in the computation graph."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def backward(self) -> None:
        backward(self)

    # convenience operators; the functional API below is the primary surface
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Learnable tensor with a persistent gradient slot and Adam moment buffers."""

    __slots__ = ("name", "adam_m", "adam_v")

    def __init__(self, value, name: str):
        super().__init__(value, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.value.shape})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _node(value: np.ndarray, parents, backward_fn) -> Tensor:
    """Create a graph node; collapse to a constant if no parent needs grad."""
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy() if isinstance(t, Parameter) else g
    else:
        t.grad = t.grad + g


def backward(root: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar root."""
    if root.value.ndim != 0:
        raise ValueError("backward() requires a scalar root")
    if not root.requires_grad:
        return
    # topological order by iterative DFS
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
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    root.grad = np.ones((), dtype=np.float64)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    # the graph is left intact: cached subgraphs may feed several roots, and
    # a second backward through a stripped node would silently lose gradients
    for node in order:
        if not isinstance(node, Parameter):
            node.grad = None


# ---------------------------------------------------------------------------
# elementwise arithmetic (with numpy broadcasting)
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    value = a.value + b.value

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.value.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.value.shape))

    return _node(value, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    value = a.value - b.value

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.value.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.value.shape))

    return _node(value, (a, b), bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)
    value = -a.value

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, -g)

    return _node(value, (a,), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    value = a.value * b.value

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.value, a.value.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.value, b.value.shape))

    return _node(value, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    value = a.value / b.value

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.value, a.value.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))

    return _node(value, (a, b), bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """(m,n) @ (n,p) -> (m,p)."""
    a, b = as_tensor(a), as_tensor(b)
    value = a.value @ b.value

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g @ b.value.T)
        if b.requires_grad:
            _accumulate(b, a.value.T @ g)

    return _node(value, (a, b), bwd)


def matvec(m, v) -> Tensor:
    """(k,n) @ (n,) -> (k,)."""
    m, v = as_tensor(m), as_tensor(v)
    value = m.value @ v.value

    def bwd(g):
        if m.requires_grad:
            _accumulate(m, np.outer(g, v.value))
        if v.requires_grad:
            _accumulate(v, m.value.T @ g)

    return _node(value, (m, v), bwd)


def vecmat(v, m) -> Tensor:
    """(n,) @ (n,p) -> (p,)."""
    v, m = as_tensor(v), as_tensor(m)
    value = v.value @ m.value

    def bwd(g):
        if v.requires_grad:
            _accumulate(v, m.value @ g)
        if m.requires_grad:
            _accumulate(m, np.outer(v.value, g))

    return _node(value, (v, m), bwd)


def dot(a, b) -> Tensor:
    """Inner product of two 1-D tensors."""
    a, b = as_tensor(a), as_tensor(b)
    value = np.asarray(a.value @ b.value)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * b.value)
        if b.requires_grad:
            _accumulate(b, g * a.value)

    return _node(value, (a, b), bwd)


# ---------------------------------------------------------------------------
# reductions, indexing, reshaping
# ---------------------------------------------------------------------------


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    value = np.asarray(a.value.sum(axis=axis))

    def bwd(g):
        if not a.requires_grad:
            return
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.value.shape).copy())
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.value.shape).copy())

    return _node(value, (a,), bwd)


def tmean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / n)


def take_rows(a, indices) -> Tensor:
    """Gather rows of a 2-D tensor; backward scatter-adds."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    value = a.value[idx]

    def bwd(g):
        if a.requires_grad:
            out = np.zeros_like(a.value)
            np.add.at(out, idx, g)
            _accumulate(a, out)

    return _node(value, (a,), bwd)


def take_row(a, index: int) -> Tensor:
    """Pick one row of a 2-D tensor as a 1-D tensor."""
    a = as_tensor(a)
    i = int(index)
    value = a.value[i]

    def bwd(g):
        if a.requires_grad:
            out = np.zeros_like(a.value)
            out[i] = g
            _accumulate(a, out)

    return _node(value, (a,), bwd)


def get(a, index: int) -> Tensor:
    """Pick one entry of a 1-D tensor as a scalar."""
    a = as_tensor(a)
    value = np.asarray(a.value[index])

    def bwd(g):
        if a.requires_grad:
            out = np.zeros_like(a.value)
            out[index] = g
            _accumulate(a, out)

    return _node(value, (a,), bwd)


def concat_vec(parts) -> Tensor:
    """Concatenate 1-D tensors; backward splits the gradient."""
    parts = [as_tensor(p) for p in parts]
    sizes = [p.value.shape[0] for p in parts]
    value = np.concatenate([p.value for p in parts])

    def bwd(g):
        offset = 0
        for p, size in zip(parts, sizes):
            if p.requires_grad:
                _accumulate(p, g[offset : offset + size])
            offset += size

    return _node(value, tuple(parts), bwd)


def narrow(a, start: int, stop: int, axis: int = 0) -> Tensor:
    """Contiguous slice along one axis."""
    a = as_tensor(a)
    sl = [slice(None)] * a.value.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    value = a.value[sl]

    def bwd(g):
        if a.requires_grad:
            out = np.zeros_like(a.value)
            out[sl] = g
            _accumulate(a, out)

    return _node(value, (a,), bwd)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def relu(a) -> Tensor:
    a = as_tensor(a)
    value = np.maximum(a.value, 0.0)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * (a.value > 0.0))

    return _node(value, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    value = 1.0 / (1.0 + np.exp(-a.value))

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * value * (1.0 - value))

    return _node(value, (a,), bwd)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    value = np.tanh(a.value)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * (1.0 - value * value))

    return _node(value, (a,), bwd)


def exp(a) -> Tensor:
    a = as_tensor(a)
    value = np.exp(a.value)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * value)

    return _node(value, (a,), bwd)


def log(a) -> Tensor:
    a = as_tensor(a)
    value = np.log(a.value)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g / a.value)

    return _node(value, (a,), bwd)


def cos(a) -> Tensor:
    a = as_tensor(a)
    value = np.cos(a.value)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, -g * np.sin(a.value))

    return _node(value, (a,), bwd)


def sin(a) -> Tensor:
    a = as_tensor(a)
    value = np.sin(a.value)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * np.cos(a.value))

    return _node(value, (a,), bwd)


def clip_min(a, lo: float) -> Tensor:
    """max(a, lo); gradient is blocked where the clamp is active."""
    a = as_tensor(a)
    value = np.maximum(a.value, lo)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * (a.value > lo))

    return _node(value, (a,), bwd)


# ---------------------------------------------------------------------------
# softmax family (1-D, max-subtracted for overflow safety)
# ---------------------------------------------------------------------------


def softmax(a) -> Tensor:
    a = as_tensor(a)
    shifted = a.value - a.value.max()
    e = np.exp(shifted)
    value = e / e.sum()

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, value * (g - np.dot(g, value)))

    return _node(value, (a,), bwd)


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    m = a.value.max()
    shifted = a.value - m
    lse = m + np.log(np.exp(shifted).sum())
    value = a.value - lse
    p = np.exp(value)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g - p * g.sum())

    return _node(value, (a,), bwd)
