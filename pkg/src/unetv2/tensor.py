"""Dense tensors with reverse-mode automatic differentiation.

Every operation records one node on a per-pass tape (``Graph``).  Nodes are
appended in execution order, so the tape is topologically sorted by
construction; ``backward`` walks it once in reverse.  A graph is single-use:
it is consumed by ``backward`` and a fresh one is recorded lazily on the next
forward pass that touches a ``requires_grad`` leaf.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class GraphError(RuntimeError):
    """Misuse of the recording graph (reuse after backward, non-scalar loss, ...)."""


class _TapeState(threading.local):
    def __init__(self):
        self.enabled = True


_STATE = _TapeState()


class no_grad:
    """Context manager that disables graph recording inside the block."""

    def __enter__(self):
        self._prev = _STATE.enabled
        _STATE.enabled = False
        return self

    def __exit__(self, *exc):
        _STATE.enabled = self._prev
        return False


class Tensor:
    """N-dimensional array value, optionally tracked on a recording graph."""

    __slots__ = ("data", "requires_grad", "grad", "node", "graph")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        arr = np.ascontiguousarray(arr)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data contains non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: int | None = None
        self.graph: Graph | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        # internal fast path for op outputs; finiteness is checked in apply_op
        t = object.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t.node = None
        t.graph = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, severed from any recording graph."""
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flags = []
        if self.requires_grad:
            flags.append("requires_grad")
        if self.node is not None:
            flags.append(f"node={self.node}")
        tail = (", " + ", ".join(flags)) if flags else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{tail})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return hadamard(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("parents", "backward", "leaf")

    def __init__(self, parents, backward, leaf):
        self.parents = parents
        self.backward = backward
        self.leaf = leaf


class Graph:
    """Append-only tape of operation records for one forward pass."""

    __slots__ = ("nodes", "leaf_tensors", "consumed")

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaf_tensors: list[Tensor] = []
        self.consumed = False

    def add_leaf(self, tensor: Tensor) -> int:
        self.nodes.append(_Node((), None, tensor))
        self.leaf_tensors.append(tensor)
        return len(self.nodes) - 1

    def add_node(self, parents: tuple, backward: BackwardFn) -> int:
        self.nodes.append(_Node(parents, backward, None))
        return len(self.nodes) - 1


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def apply_op(name: str, inputs: Sequence[Tensor], out_data: np.ndarray,
             backward_fn: BackwardFn) -> Tensor:
    """Wrap an op result, recording a graph node when any input is tracked.

    ``backward_fn`` receives the output gradient and returns one gradient per
    input (``None`` for inputs that need none).  This is the extension point
    used by every operator in the package.
    """
    if not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"{name}: produced non-finite values")
    dtypes = {t.data.dtype for t in inputs}
    if len(dtypes) > 1:
        raise TypeError(f"{name}: mixed element widths {sorted(d.name for d in dtypes)}")
    out = Tensor._wrap(out_data)
    if not _STATE.enabled:
        return out
    graph = None
    for t in inputs:
        if t.graph is not None:
            if t.graph.consumed:
                raise GraphError(
                    f"{name}: input belongs to a graph already consumed by backward(); "
                    "detach() it or re-record the forward pass")
            if graph is None:
                graph = t.graph
            elif graph is not t.graph:
                raise GraphError(f"{name}: inputs belong to two different graphs")
    tracked = any(t.requires_grad or t.node is not None for t in inputs)
    if not tracked:
        return out
    if graph is None:
        graph = Graph()
    for t in inputs:
        if t.requires_grad and t.node is None:
            t.graph = graph
            t.node = graph.add_leaf(t)
    parents = tuple(t.node for t in inputs)
    out.graph = graph
    out.node = graph.add_node(parents, backward_fn)
    return out


def backward(loss: Tensor):
    """Fill ``grad`` on every requires_grad leaf reachable from ``loss``.

    Gradients of values used in several places accumulate by summation.  The
    graph is consumed afterwards; leaves are unhooked so the next forward
    pass records a fresh one.
    """
    if loss.graph is None or loss.node is None:
        raise GraphError("backward: loss was not produced by a recorded graph")
    if loss.graph.consumed:
        raise GraphError("backward: graph already consumed; re-record the forward pass")
    if loss.data.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
    graph = loss.graph
    grads: list[np.ndarray | None] = [None] * len(graph.nodes)
    grads[loss.node] = np.ones_like(loss.data)
    for k in range(loss.node, -1, -1):
        gk = grads[k]
        grads[k] = None
        if gk is None:
            continue
        node = graph.nodes[k]
        if node.leaf is not None:
            leaf = node.leaf
            if leaf.requires_grad:
                leaf.grad = gk.copy() if leaf.grad is None else leaf.grad + gk
            continue
        for pid, contrib in zip(node.parents, node.backward(gk)):
            if pid is None or contrib is None:
                continue
            grads[pid] = contrib if grads[pid] is None else grads[pid] + contrib
    graph.consumed = True
    for t in graph.leaf_tensors:
        t.node = None
        t.graph = None


# ---------------------------------------------------------------------------
# elementwise operations


def hadamard(a, b) -> Tensor:
    """Elementwise product of two equal-shaped tensors."""
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data

    def bwd(g):
        return g * bd, g * ad

    return apply_op("hadamard", (a, b), ad * bd, bwd)


# alias: hadamard is the only general multiply in this framework
mul = hadamard


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def bwd(g):
        return g, g

    return apply_op("add", (a, b), a.data + b.data, bwd)


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")

    def bwd(g):
        return g, -g

    return apply_op("sub", (a, b), a.data - b.data, bwd)


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.shape != b.shape:
        raise ShapeError(f"div: shapes {a.shape} and {b.shape} differ")
    out_data = a.data / b.data
    bd = b.data

    def bwd(g):
        return g / bd, -g * out_data / bd

    return apply_op("div", (a, b), out_data, bwd)


def scalar_mul(x: Tensor, s: float) -> Tensor:
    x = _as_tensor(x)
    s = float(s)

    def bwd(g):
        return (g * s,)

    return apply_op("scalar_mul", (x,), x.data * s, bwd)


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is 0."""
    x = _as_tensor(x)
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)

    return apply_op("relu", (x,), np.maximum(x.data, 0), bwd)


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return (g * out_data * (1.0 - out_data),)

    return apply_op("sigmoid", (x,), out_data, bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents disagree, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return apply_op("matmul", (a, b), ad @ bd, bwd)


# ---------------------------------------------------------------------------
# reductions


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(int(a) for a in axes)
    norm = tuple(a + ndim if a < 0 else a for a in axes)
    for a in norm:
        if not 0 <= a < ndim:
            raise ShapeError(f"invalid axis {a} for {ndim}-dimensional tensor")
    if len(set(norm)) != len(norm):
        raise ShapeError(f"duplicate axes {axes}")
    return tuple(sorted(norm))


def reduce_mean(x: Tensor, axes, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _normalize_axes(axes, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    shape = x.shape

    def bwd(g):
        ge = g
        if not keepdims:
            for a in axes:
                ge = np.expand_dims(ge, a)
        return (np.broadcast_to(ge, shape) / count,)

    return apply_op("reduce_mean", (x,), x.data.mean(axis=axes, keepdims=keepdims), bwd)


def reduce_max(x: Tensor, axes, keepdims: bool = False) -> Tensor:
    """Max over ``axes``; ties route the gradient to the first (lowest flat index) maximizer."""
    x = _as_tensor(x)
    axes = _normalize_axes(axes, x.ndim)
    nred = len(axes)
    moved = np.moveaxis(x.data, axes, range(x.ndim - nred, x.ndim))
    lead_shape = moved.shape[: x.ndim - nred]
    flat = moved.reshape(lead_shape + (-1,))
    idx = np.argmax(flat, axis=-1)
    out_flat = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out_data = out_flat
    if keepdims:
        kshape = list(x.shape)
        for a in axes:
            kshape[a] = 1
        out_data = out_flat.reshape(kshape)
    moved_shape = moved.shape
    orig_shape = x.shape

    def bwd(g):
        gflat = g.reshape(lead_shape)
        buf = np.zeros(lead_shape + (flat.shape[-1],), dtype=g.dtype)
        np.put_along_axis(buf, idx[..., None], gflat[..., None], axis=-1)
        return (np.moveaxis(buf.reshape(moved_shape),
                            range(x.ndim - nred, x.ndim), axes).reshape(orig_shape),)

    return apply_op("reduce_max", (x,), out_data, bwd)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    x = _as_tensor(x)
    shape = x.shape

    def bwd(g):
        return (np.broadcast_to(g, shape).copy(),)

    return apply_op("sum_all", (x,), np.asarray(x.data.sum()), bwd)


# ---------------------------------------------------------------------------
# shape manipulation


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: needs at least one tensor")
    ndim = tensors[0].ndim
    if not 0 <= axis < ndim:
        raise ShapeError(f"concat: invalid axis {axis} for {ndim}-dimensional tensors")
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != ndim or any(o != r for i, (o, r) in enumerate(zip(other, ref)) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return np.split(g, splits, axis=axis)

    return apply_op("concat", tuple(tensors),
                    np.concatenate([t.data for t in tensors], axis=axis), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    orig = x.shape

    def bwd(g):
        return (g.reshape(orig),)

    return apply_op("reshape", (x,), x.data.reshape(shape), bwd)


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Expand extent-1 axes to ``shape``; backward sums over the expanded axes."""
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if x.ndim != len(shape):
        raise ShapeError(f"broadcast_to: rank mismatch, {x.shape} to {shape}")
    expanded = []
    for i, (have, want) in enumerate(zip(x.shape, shape)):
        if have == want:
            continue
        if have == 1:
            expanded.append(i)
        else:
            raise ShapeError(f"broadcast_to: cannot expand {x.shape} to {shape}")
    axes = tuple(expanded)

    def bwd(g):
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return apply_op("broadcast_to", (x,), np.broadcast_to(x.data, shape).copy(), bwd)
