"""Minimal reverse-mode autodiff over numpy arrays.

Every backward rule is expressed with the same differentiable ops, so a
gradient computed with ``create_graph=True`` is itself a graph and can be
differentiated again. That is what Hessian-vector products (and the
Hutchinson diagonal estimator) are built on.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np


class _Flags(threading.local):
    # per thread, so broker ticks running on a pool do not toggle each other's recording
    record = True


_FLAGS = _Flags()


class ContractError(ValueError):
    """Raised when an operation's preconditions are violated."""


class NumericalError(ArithmeticError):
    """Raised when a computation produced non-finite values."""


@contextlib.contextmanager
def _recording(flag):
    prev = _FLAGS.record
    _FLAGS.record = flag
    try:
        yield
    finally:
        _FLAGS.record = prev


def no_grad():
    return _recording(False)


class Node:
    """A value in the computation graph.

    ``vjp`` maps the upstream gradient (a Node) and a tuple of flags saying
    which parents need a gradient to a tuple of parent gradients.
    """

    __slots__ = ("value", "grad", "parents", "vjp", "requires_grad", "op")

    def __init__(self, value, requires_grad=False, parents=(), vjp=None, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def is_leaf(self):
        return not self.parents

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(as_node(other)))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Node):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, c):
        return power(self, c)

    def __getitem__(self, idx):
        raise TypeError("use take() / slice_axis() for differentiable indexing")


def as_node(x):
    return x if isinstance(x, Node) else Node(x)


def constant(x):
    return Node(x)


def _make(value, parents, vjp, op):
    """Create an op output, recording the graph only when needed."""
    if _FLAGS.record and any(p.requires_grad for p in parents):
        return Node(value, True, parents, vjp, op)
    return Node(value, False, (), None, op)


# ---------------------------------------------------------------- shape ops


def sum_to(a, shape):
    """Sum ``a`` down to ``shape`` (reverse of numpy broadcasting)."""
    a = as_node(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    v = a.value
    lead = v.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and v.shape[i + lead] != 1
    )
    out = v.sum(axis=axes, keepdims=True)
    if lead:
        out = out.reshape(out.shape[lead:])
    src_shape = a.shape

    def vjp(g, needs):
        return (broadcast_to(g, src_shape),)

    return _make(out.reshape(shape), (a,), vjp, "sum_to")


def broadcast_to(a, shape):
    a = as_node(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    src_shape = a.shape

    def vjp(g, needs):
        return (sum_to(g, src_shape),)

    return _make(np.broadcast_to(a.value, shape).copy(), (a,), vjp, "broadcast_to")


def reshape(a, shape):
    a = as_node(a)
    src_shape = a.shape

    def vjp(g, needs):
        return (reshape(g, src_shape),)

    return _make(a.value.reshape(shape), (a,), vjp, "reshape")


def transpose(a, axes=None):
    """Permute axes; default swaps the last two."""
    a = as_node(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def vjp(g, needs):
        return (transpose(g, inv),)

    return _make(np.transpose(a.value, axes), (a,), vjp, "transpose")


def slice_axis(a, start, stop, axis):
    a = as_node(a)
    axis = axis % a.ndim
    n = a.shape[axis]
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)

    def vjp(g, needs):
        return (pad_axis(g, start, n - stop, axis),)

    return _make(a.value[tuple(sl)], (a,), vjp, "slice")


def pad_axis(a, before, after, axis):
    a = as_node(a)
    axis = axis % a.ndim
    widths = [(0, 0)] * a.ndim
    widths[axis] = (before, after)
    stop = before + a.shape[axis]

    def vjp(g, needs):
        return (slice_axis(g, before, stop, axis),)

    return _make(np.pad(a.value, widths), (a,), vjp, "pad")


def take(a, idx, axis):
    """Gather entries of ``a`` along ``axis`` (``idx`` may repeat)."""
    a = as_node(a)
    idx = np.asarray(idx, dtype=np.int64)
    axis = axis % a.ndim
    src_shape = a.shape

    def vjp(g, needs):
        return (scatter(g, idx, axis, src_shape),)

    return _make(np.take(a.value, idx, axis=axis), (a,), vjp, "take")


def scatter(a, idx, axis, shape):
    """Adjoint of ``take``: add slices of ``a`` into zeros of ``shape``."""
    a = as_node(a)
    out = np.zeros(shape)
    moved = np.moveaxis(out, axis, 0)
    np.add.at(moved, idx, np.moveaxis(a.value, axis, 0))

    def vjp(g, needs):
        return (take(g, idx, axis),)

    return _make(out, (a,), vjp, "scatter")


def concatenate(nodes, axis=-1):
    nodes = [as_node(n) for n in nodes]
    axis = axis % nodes[0].ndim
    sizes = [n.shape[axis] for n in nodes]
    bounds = np.concatenate([[0], np.cumsum(sizes)])

    def vjp(g, needs):
        return tuple(
            slice_axis(g, int(bounds[i]), int(bounds[i + 1]), axis) if needs[i] else None
            for i in range(len(nodes))
        )

    return _make(np.concatenate([n.value for n in nodes], axis=axis), tuple(nodes), vjp, "concat")


# ---------------------------------------------------------------- arithmetic


def add(a, b):
    a, b = as_node(a), as_node(b)
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        return (sum_to(g, sa) if needs[0] else None, sum_to(g, sb) if needs[1] else None)

    return _make(a.value + b.value, (a, b), vjp, "add")


def neg(a):
    a = as_node(a)

    def vjp(g, needs):
        return (neg(g),)

    return _make(-a.value, (a,), vjp, "neg")


def mul(a, b):
    a, b = as_node(a), as_node(b)

    def vjp(g, needs):
        return (
            sum_to(mul(g, b), a.shape) if needs[0] else None,
            sum_to(mul(g, a), b.shape) if needs[1] else None,
        )

    return _make(a.value * b.value, (a, b), vjp, "mul")


def matmul(a, b):
    a, b = as_node(a), as_node(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError("matmul operands must be at least 2-D")

    def vjp(g, needs):
        return (
            sum_to(matmul(g, transpose(b)), a.shape) if needs[0] else None,
            sum_to(matmul(transpose(a), g), b.shape) if needs[1] else None,
        )

    return _make(a.value @ b.value, (a, b), vjp, "matmul")


def power(a, c):
    """Elementwise ``a ** c`` for a constant exponent."""
    a = as_node(a)
    c = float(c)

    def vjp(g, needs):
        return (mul(g, mul(power(a, c - 1.0), c)),)

    return _make(a.value**c, (a,), vjp, "power")


def square(a):
    a = as_node(a)

    def vjp(g, needs):
        return (mul(g, mul(a, 2.0)),)

    return _make(a.value * a.value, (a,), vjp, "square")


def exp(a):
    a = as_node(a)
    out = None

    def vjp(g, needs):
        return (mul(g, out),)

    out = _make(np.exp(a.value), (a,), vjp, "exp")
    return out


def log(a):
    a = as_node(a)

    def vjp(g, needs):
        return (mul(g, power(a, -1.0)),)

    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.log(a.value)
    return _make(v, (a,), vjp, "log")


def clip(a, lo, hi):
    """Clamp with a zero gradient outside ``[lo, hi]``."""
    a = as_node(a)
    mask = ((a.value >= lo) & (a.value <= hi)).astype(np.float64)

    def vjp(g, needs):
        return (mul(g, mask),)

    return _make(np.clip(a.value, lo, hi), (a,), vjp, "clip")


# ---------------------------------------------------------------- activations


def relu(a):
    # second derivative is taken to be zero everywhere
    a = as_node(a)
    mask = (a.value > 0).astype(np.float64)

    def vjp(g, needs):
        return (mul(g, mask),)

    return _make(a.value * mask, (a,), vjp, "relu")


def tanh(a):
    a = as_node(a)
    out = None

    def vjp(g, needs):
        return (mul(g, add(1.0, neg(square(out)))),)

    out = _make(np.tanh(a.value), (a,), vjp, "tanh")
    return out


def sigmoid(a):
    a = as_node(a)
    out = None

    def vjp(g, needs):
        return (mul(g, mul(out, add(1.0, neg(out)))),)

    v = a.value
    with np.errstate(over="ignore"):
        val = np.where(v >= 0, 1.0 / (1.0 + np.exp(-v)), np.exp(v) / (1.0 + np.exp(v)))
    out = _make(val, (a,), vjp, "sigmoid")
    return out


def softmax(a):
    """Softmax over the last axis."""
    a = as_node(a)
    out = None

    def vjp(g, needs):
        dot = sum(mul(g, out), axis=-1, keepdims=True)
        return (mul(out, add(g, neg(dot))),)

    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = _make(e / e.sum(axis=-1, keepdims=True), (a,), vjp, "softmax")
    return out


# ---------------------------------------------------------------- reductions


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    a = as_node(a)
    src_shape = a.shape
    kept = np.sum(a.value, axis=axis, keepdims=True)

    def vjp(g, needs):
        return (broadcast_to(reshape(g, kept.shape), src_shape),)

    val = kept if keepdims else np.sum(a.value, axis=axis)
    return _make(val, (a,), vjp, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_node(a)
    if axis is None:
        count = a.value.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / max(count, 1))


# ---------------------------------------------------------------- traversal


def _toposort(root):
    """Nodes reachable from ``root`` that require grad, children before parents."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def grad(root, wrt, create_graph=False, seed=None):
    """Gradients of ``root`` with respect to each node in ``wrt``.

    Returns Nodes; with ``create_graph`` they are differentiable. Nodes in
    ``wrt`` that ``root`` does not depend on get zero gradients.
    """
    root = as_node(root)
    wrt = list(wrt)
    if seed is None:
        if root.value.size != 1:
            raise ContractError(f"gradient root must be scalar, got shape {root.shape}")
        seed = np.ones_like(root.value)
    targets = {id(n) for n in wrt}
    order = _toposort(root) if root.requires_grad else []

    # keep only nodes lying on a path to some target
    relevant = set()
    for node in reversed(order):
        if id(node) in targets or any(id(p) in relevant for p in node.parents):
            relevant.add(id(node))

    grads = {id(root): Node(seed)}
    with _recording(create_graph):
        for node in order:
            if id(node) not in relevant or node.vjp is None:
                continue
            g = grads.get(id(node))
            if g is None:
                continue
            needs = tuple(id(p) in relevant for p in node.parents)
            pgrads = node.vjp(g, needs)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or id(p) not in relevant:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
    return [grads.get(id(n), Node(np.zeros_like(n.value))) for n in wrt]


def backward(root):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every trainable leaf.

    Returns a dict mapping each such leaf to its gradient array.
    """
    root = as_node(root)
    if root.value.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    leaves = [n for n in _toposort(root) if n.is_leaf and n.requires_grad] if root.requires_grad else []
    gs = grad(root, leaves)
    out = {}
    for leaf, g in zip(leaves, gs):
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.value)
        leaf.grad = leaf.grad + g.value
        out[leaf] = g.value
    return out


def hvp(root, wrt, v):
    """Hessian-vector product of scalar ``root`` w.r.t. leaf ``wrt``."""
    (g,) = grad(root, [wrt], create_graph=True)
    (hv,) = grad(sum(mul(g, v)), [wrt])
    return hv.value


def grad_and_hutchinson(root, wrt, samples, rng):
    """Return (gradient, Hutchinson estimate of the Hessian diagonal)."""
    if samples < 1:
        raise ContractError("hutchinson needs at least one sample")
    (g,) = grad(root, [wrt], create_graph=True)
    est = np.zeros_like(wrt.value)
    if not g.requires_grad:
        # gradient does not depend on wrt: Hessian is zero
        return g.value.copy(), est
    for _ in range(samples):
        z = rng.choice(np.array([-1.0, 1.0]), size=wrt.shape)
        (hz,) = grad(sum(mul(g, z)), [wrt])
        est += z * hz.value
    return g.value.copy(), est / samples


def hutchinson_diag(root, wrt, samples, rng):
    """Unbiased estimate of diag(H) as the mean of z * (H z), z Rademacher."""
    return grad_and_hutchinson(root, wrt, samples, rng)[1]
