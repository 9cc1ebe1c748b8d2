"""Reverse-mode differentiation over dense float64 arrays.

Every op records its parents and a closure that pushes the output gradient
back to them. ``backward`` walks the tape in reverse topological order. A
node built only from constants carries no closure, so evaluation without
parameters (or inside ``no_grad``) costs nothing beyond the numpy call.

ReLU uses subgradient 0 at exactly 0. Conv1d is a cross-correlation (no
kernel flip).
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import DimensionError, EmptySequenceError, GraphError, SequenceTooShortError
from . import kernels

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording backward closures."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Node:
    """A value on the tape.

    Leaves created with ``requires_grad=True`` are parameters; their ``grad``
    is zero-initialised and accumulates across every graph they take part in
    until ``zero_grad`` is called.
    """

    __slots__ = ("value", "grad", "parents", "backward_fn", "op", "requires_grad", "_done")

    def __init__(self, value, requires_grad: bool = False, parents: tuple = (),
                 backward_fn: Callable | None = None, op: str = "leaf"):
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(value) if (requires_grad and not parents) else None
        self._done = False

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def zero_grad(self) -> None:
        if self.is_leaf:
            self.grad = np.zeros_like(self.value)
        else:
            self.grad = None

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable parameter leaf.

        ``self`` must be a scalar. Calling it twice on the same graph without
        ``reset_graph`` raises :class:`GraphError`.
        """
        if self.value.size != 1:
            raise DimensionError(f"backward needs a scalar root, got shape {self.value.shape}")
        if self._done:
            raise GraphError("backward already ran on this graph; call reset_graph() first")
        order = _topo(self)
        self._done = True
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)
        # free intermediate buffers; leaves keep theirs
        for node in order:
            if not node.is_leaf:
                node.grad = None


def _topo(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def reset_graph(root: Node) -> None:
    """Zero all gradients reachable from ``root`` and allow another backward."""
    for node in _topo(root):
        node.zero_grad()
        node._done = False


def _acc(node: Node, g) -> None:
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        node.grad += g


def _make(value, parents: tuple, fn_factory, op: str) -> Node:
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not track:
        return Node(value, op=op)
    out = Node(value, requires_grad=True, parents=parents, op=op)
    out.backward_fn = fn_factory(out)
    return out


def param(value) -> Node:
    """A trainable leaf (copies ``value`` to float64)."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True)


def const(value) -> Node:
    return Node(np.asarray(value, dtype=np.float64))


def as_node(x) -> Node:
    return x if isinstance(x, Node) else const(x)


# --- ops -------------------------------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {av.shape} x {bv.shape}")

    def factory(out):
        def fn(g):
            _acc(a, g @ bv.T)
            _acc(b, av.T @ g)
        return fn

    return _make(av @ bv, (a, b), factory, "matmul")


def add(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise DimensionError(f"add shape mismatch: {a.value.shape} vs {b.value.shape}")

    def factory(out):
        def fn(g):
            _acc(a, g)
            _acc(b, g)
        return fn

    return _make(a.value + b.value, (a, b), factory, "add")


def add_bias(x: Node, b: Node) -> Node:
    """Add a length-n vector to every row of a T x n matrix."""
    if x.value.ndim != 2 or b.value.shape != (x.value.shape[1],):
        raise DimensionError(f"add_bias shape mismatch: {x.value.shape} + {b.value.shape}")

    def factory(out):
        def fn(g):
            _acc(x, g)
            _acc(b, g.sum(axis=0))
        return fn

    return _make(x.value + b.value, (x, b), factory, "add_bias")


def relu(x: Node) -> Node:
    mask = x.value > 0

    def factory(out):
        def fn(g):
            _acc(x, g * mask)
        return fn

    return _make(x.value * mask, (x,), factory, "relu")


def scale(x: Node, c: float) -> Node:
    c = float(c)

    def factory(out):
        def fn(g):
            _acc(x, g * c)
        return fn

    return _make(x.value * c, (x,), factory, "scale")


def conv1d(x: Node, kernel: Node, bias: Node, stride: int = 1, padding: int = 0) -> Node:
    """Strided 1-D cross-correlation over time.

    ``x`` is (T, C_in), ``kernel`` is (C_out, C_in, width), ``bias`` is (C_out,).
    Output length is ``(T + 2*padding - width) // stride + 1``.
    """
    xv, kv = x.value, kernel.value
    if xv.ndim != 2 or kv.ndim != 3 or xv.shape[1] != kv.shape[1]:
        raise DimensionError(f"conv1d channel mismatch: input {xv.shape}, kernel {kv.shape}")
    if bias.value.shape != (kv.shape[0],):
        raise DimensionError(f"conv1d bias {bias.value.shape} does not match kernel {kv.shape}")
    if stride < 1:
        raise ValueError("conv1d stride must be >= 1")
    width = kv.shape[2]
    if xv.shape[0] + 2 * padding < width:
        raise SequenceTooShortError(
            f"sequence of length {xv.shape[0]} shorter than receptive field "
            f"(width {width}, padding {padding})")
    xc = np.ascontiguousarray(xv)
    y = kernels.conv1d_forward(xc, kv, bias.value, stride, padding)

    def factory(out):
        def fn(g):
            gx, gk, gb = kernels.conv1d_backward(xc, kv, np.ascontiguousarray(g), stride, padding)
            _acc(x, gx)
            _acc(kernel, gk)
            _acc(bias, gb)
        return fn

    return _make(y, (x, kernel, bias), factory, "conv1d")


def softmax_rows(x: Node) -> Node:
    xv = x.value
    e = np.exp(xv - xv.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def factory(out):
        def fn(g):
            _acc(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))
        return fn

    return _make(y, (x,), factory, "softmax_rows")


def mean_over_time(x: Node) -> Node:
    """Column means of a (T, M) matrix, returned as a length-M vector."""
    xv = x.value
    if xv.ndim != 2:
        raise DimensionError(f"mean_over_time expects a matrix, got {xv.shape}")
    n = xv.shape[0]
    if n == 0:
        raise EmptySequenceError("mean_over_time over an empty sequence")
    # axis-0 reduction of a C-ordered matrix accumulates rows in index order
    y = np.ascontiguousarray(xv).sum(axis=0) / n

    def factory(out):
        def fn(g):
            _acc(x, np.broadcast_to(g / n, xv.shape))
        return fn

    return _make(y, (x,), factory, "mean_over_time")


def mean_of(nodes: Sequence[Node]) -> Node:
    """Elementwise arithmetic mean of same-shaped nodes, summed in list order."""
    if not nodes:
        raise EmptySequenceError("mean_of needs at least one operand")
    shape = nodes[0].value.shape
    for n in nodes:
        if n.value.shape != shape:
            raise DimensionError(f"mean_of shape mismatch: {shape} vs {n.value.shape}")
    acc = nodes[0].value.copy()
    for n in nodes[1:]:
        acc += n.value
    k = len(nodes)
    y = acc / k

    def factory(out):
        def fn(g):
            gk = g / k
            for n in nodes:
                _acc(n, gk)
        return fn

    return _make(y, tuple(nodes), factory, "mean_of")


def take(stack: Node, index: int) -> Node:
    """Slice ``stack[index]`` along the leading axis."""
    index = int(index)

    def factory(out):
        def fn(g):
            if stack.grad is None:
                stack.grad = np.zeros_like(stack.value)
            stack.grad[index] += g
        return fn

    return _make(stack.value[index], (stack,), factory, "take")


def weighted_sum(weights: Node, stack: Node) -> Node:
    """``sum_m weights[m] * stack[m]`` over the leading axis of ``stack``.

    A one-hot weight vector returns the selected slice bit-for-bit (all other
    terms are exact zeros).
    """
    w, s = weights.value, stack.value
    if w.ndim != 1 or s.shape[0] != w.shape[0]:
        raise DimensionError(f"weighted_sum: weights {w.shape} vs stack {s.shape}")
    flat = s.reshape(s.shape[0], -1)
    # one vector-matrix product; far cheaper than tensordot's setup at these sizes
    y = (w @ flat).reshape(s.shape[1:])

    def factory(out):
        def fn(g):
            if weights.requires_grad:
                _acc(weights, flat @ g.reshape(-1))
            if stack.requires_grad:
                _acc(stack, w.reshape((-1,) + (1,) * g.ndim) * g)
        return fn

    return _make(y, (weights, stack), factory, "weighted_sum")


def pick(v: Node, index: int) -> Node:
    """Scalar ``v[index]`` of a vector, as a 0-d node."""
    index = int(index)

    def factory(out):
        def fn(g):
            if v.grad is None:
                v.grad = np.zeros_like(v.value)
            v.grad[index] += g
        return fn

    return _make(np.asarray(v.value[index]), (v,), factory, "pick")


def mul_scalar(s: Node, x: Node) -> Node:
    """Multiply ``x`` by a 0-d node ``s``."""
    sv = float(s.value)

    def factory(out):
        def fn(g):
            _acc(s, np.asarray((g * x.value).sum()))
            _acc(x, g * sv)
        return fn

    return _make(x.value * sv, (s, x), factory, "mul_scalar")


def sum_nodes(nodes: Sequence[Node]) -> Node:
    """Elementwise sum of same-shaped nodes, in list order."""
    if not nodes:
        raise EmptySequenceError("sum_nodes needs at least one operand")
    acc = nodes[0].value.copy()
    for n in nodes[1:]:
        if n.value.shape != acc.shape:
            raise DimensionError(f"sum_nodes shape mismatch: {acc.shape} vs {n.value.shape}")
        acc = acc + n.value

    def factory(out):
        def fn(g):
            for n in nodes:
                _acc(n, g)
        return fn

    return _make(acc, tuple(nodes), factory, "sum_nodes")


def gather_rows(x: Node, rows: np.ndarray) -> Node:
    rows = np.asarray(rows, dtype=np.intp)

    def factory(out):
        def fn(g):
            if x.grad is None:
                x.grad = np.zeros_like(x.value)
            np.add.at(x.grad, rows, g)
        return fn

    return _make(x.value[rows], (x,), factory, "gather_rows")


def column_entries(x: Node, rows: np.ndarray, col: int) -> Node:
    """Vector ``x[rows, col]``."""
    rows = np.asarray(rows, dtype=np.intp)
    col = int(col)

    def factory(out):
        def fn(g):
            if x.grad is None:
                x.grad = np.zeros_like(x.value)
            np.add.at(x.grad[:, col], rows, g)
        return fn

    return _make(x.value[rows, col].copy(), (x,), factory, "column_entries")


def scale_rows(w: Node, x: Node) -> Node:
    """Row ``r`` of ``x`` times ``w[r]``."""
    wv, xv = w.value, x.value
    if wv.shape != (xv.shape[0],):
        raise DimensionError(f"scale_rows: weights {wv.shape} vs rows {xv.shape}")

    def factory(out):
        def fn(g):
            _acc(w, (g * xv).sum(axis=1))
            _acc(x, g * wv[:, None])
        return fn

    return _make(xv * wv[:, None], (w, x), factory, "scale_rows")


def scatter_rows(parts: Sequence[tuple[np.ndarray, Node]], n_rows: int, n_cols: int) -> Node:
    """Assemble an (n_rows, n_cols) matrix by adding each part into its rows.

    Parts are added in list order; rows covered by no part stay zero.
    """
    y = np.zeros((n_rows, n_cols))
    idx = [np.asarray(r, dtype=np.intp) for r, _ in parts]
    nodes = tuple(n for _, n in parts)
    for r, n in zip(idx, nodes):
        if n.value.shape != (len(r), n_cols):
            raise DimensionError(f"scatter_rows part {n.value.shape} vs {len(r)} rows x {n_cols}")
        np.add.at(y, r, n.value)

    def factory(out):
        def fn(g):
            for r, n in zip(idx, nodes):
                _acc(n, g[r])
        return fn

    return _make(y, nodes, factory, "scatter_rows")


def concat_rows(nodes: Sequence[Node]) -> Node:
    """Stack matrices with equal column counts on top of each other."""
    if not nodes:
        raise EmptySequenceError("concat_rows needs at least one operand")
    cols = {n.value.shape[1] for n in nodes}
    if len(cols) != 1:
        raise DimensionError(f"concat_rows column mismatch: {sorted(cols)}")
    bounds = np.cumsum([0] + [n.value.shape[0] for n in nodes])

    def factory(out):
        def fn(g):
            for n, lo, hi in zip(nodes, bounds[:-1], bounds[1:]):
                _acc(n, g[lo:hi])
        return fn

    return _make(np.concatenate([n.value for n in nodes], axis=0), tuple(nodes), factory,
                 "concat_rows")


def mse(pred: Node, target) -> Node:
    """Mean squared error against a constant target, as a 0-d node."""
    tv = target.value if isinstance(target, Node) else np.asarray(target, dtype=np.float64)
    if pred.value.shape != tv.shape:
        raise DimensionError(f"mse shape mismatch: {pred.value.shape} vs {tv.shape}")
    diff = pred.value - tv
    n = diff.size
    y = np.asarray((diff * diff).sum() / n)

    def factory(out):
        def fn(g):
            _acc(pred, (2.0 * float(g) / n) * diff)
        return fn

    return _make(y, (pred,), factory, "mse")


def dot_const(x: Node, c) -> Node:
    """``sum(x * c)`` for a constant array ``c``, as a 0-d node."""
    cv = np.asarray(c, dtype=np.float64)
    if cv.shape != x.value.shape:
        raise DimensionError(f"dot_const shape mismatch: {x.value.shape} vs {cv.shape}")

    def factory(out):
        def fn(g):
            _acc(x, float(g) * cv)
        return fn

    return _make(np.asarray((x.value * cv).sum()), (x,), factory, "dot_const")


def zero_grads(params: Iterable[Node]) -> None:
    for p in params:
        p.zero_grad()
