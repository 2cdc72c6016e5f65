"""Small define-by-run reverse-mode differentiation over float64 numpy arrays.

Every op evaluates eagerly and records a closure that maps the upstream
gradient to per-input gradients. Binary elementwise ops broadcast only over
leading dimensions: the smaller operand's shape must be a suffix of the
larger one's. Anything else needs an explicit ``reshape``/``expand_last``.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible for the named op."""


class ContractError(RuntimeError):
    pass


class Node:
    """A value in the computation graph.

    ``inputs`` and ``vjp`` are empty for leaves and constants. A node built by
    :func:`stop_grad` carries ``stop`` and never passes gradient upstream.
    """

    __slots__ = ("op", "value", "inputs", "vjp", "requires_grad", "stop")

    def __init__(
        self,
        value,
        op: str = "leaf",
        inputs: Sequence["Node"] = (),
        vjp: Callable[[np.ndarray], Sequence[np.ndarray]] | None = None,
        requires_grad: bool = False,
        stop: bool = False,
    ):
        self.op = op
        self.value = np.asarray(value, dtype=np.float64)
        self.value.setflags(write=False)
        self.inputs = tuple(inputs)
        self.vjp = vjp
        self.stop = stop
        self.requires_grad = requires_grad or (
            not stop and any(n.requires_grad for n in self.inputs)
        )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape})"

    # Operator sugar; constants are lifted automatically.
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def leaf(value) -> Node:
    """A differentiable input."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True)


def const(value) -> Node:
    return Node(np.array(value, dtype=np.float64))


def _lift(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def _check_suffix(op: str, a: Node, b: Node) -> None:
    sa, sb = a.shape, b.shape
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] != short:
        raise DimensionError(f"{op}: shapes {sa} and {sb} differ beyond leading batch dims")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _binary(op, a, b, fn, grad_a, grad_b) -> Node:
    a, b = _lift(a), _lift(b)
    _check_suffix(op, a, b)
    out = fn(a.value, b.value)

    def vjp(g):
        return (
            _unbroadcast(grad_a(g, a.value, b.value, out), a.shape),
            _unbroadcast(grad_b(g, a.value, b.value, out), b.shape),
        )

    return Node(out, op, (a, b), vjp)


def add(a, b) -> Node:
    return _binary("add", a, b, np.add, lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b) -> Node:
    return _binary("sub", a, b, np.subtract, lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b) -> Node:
    return _binary(
        "mul", a, b, np.multiply, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x
    )


def div(a, b) -> Node:
    return _binary(
        "div",
        a,
        b,
        np.divide,
        lambda g, x, y, o: g / y,
        lambda g, x, y, o: -g * x / (y * y),
    )


def _unary(op, x, fn, dfn) -> Node:
    x = _lift(x)
    out = fn(x.value)
    return Node(out, op, (x,), lambda g: (dfn(g, x.value, out),))


def neg(x) -> Node:
    return _unary("neg", x, np.negative, lambda g, v, o: -g)


def relu(x) -> Node:
    return _unary("relu", x, lambda v: np.maximum(v, 0.0), lambda g, v, o: g * (v > 0))


def tanh(x) -> Node:
    return _unary("tanh", x, np.tanh, lambda g, v, o: g * (1.0 - o * o))


def exp(x) -> Node:
    return _unary("exp", x, np.exp, lambda g, v, o: g * o)


def log(x) -> Node:
    return _unary("log", x, np.log, lambda g, v, o: g / v)


def sqrt(x) -> Node:
    return _unary("sqrt", x, np.sqrt, lambda g, v, o: g * 0.5 / o)


def matmul(a, b) -> Node:
    """Matrix product for 1-D/2-D operands (vector-matrix, matrix-vector, matrix-matrix)."""
    a, b = _lift(a), _lift(b)
    if a.value.ndim not in (1, 2) or b.value.ndim not in (1, 2):
        raise DimensionError(f"matmul: only 1-D/2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def vjp(g):
        a2 = av if av.ndim == 2 else av[None, :]
        b2 = bv if bv.ndim == 2 else bv[:, None]
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        return (g2 @ b2.T).reshape(av.shape), (a2.T @ g2).reshape(bv.shape)

    return Node(av @ bv, "matmul", (a, b), vjp)


def transpose(x) -> Node:
    x = _lift(x)
    if x.value.ndim != 2:
        raise DimensionError(f"transpose: expected 2-D, got {x.shape}")
    return Node(x.value.T, "transpose", (x,), lambda g: (g.T,))


def reshape(x, shape: Iterable[int]) -> Node:
    x = _lift(x)
    shape = tuple(shape)
    try:
        out = x.value.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {x.shape} -> {shape}") from exc
    src = x.shape
    return Node(out, "reshape", (x,), lambda g: (g.reshape(src),))


def expand_last(x, n: int) -> Node:
    """Repeat ``x`` along a new trailing axis of length ``n``."""
    x = _lift(x)
    out = np.repeat(x.value[..., None], n, axis=-1)
    return Node(out, "expand_last", (x,), lambda g: (g.sum(axis=-1),))


def slice_(x, start: int, stop: int) -> Node:
    """Contiguous slice of a 1-D node."""
    x = _lift(x)
    if x.value.ndim != 1 or not 0 <= start <= stop <= x.shape[0]:
        raise DimensionError(f"slice: [{start}:{stop}] of {x.shape}")
    n = x.shape[0]

    def vjp(g):
        full = np.zeros(n)
        full[start:stop] = g
        return (full,)

    return Node(x.value[start:stop], "slice", (x,), vjp)


def concat(parts: Sequence) -> Node:
    """Concatenate 1-D nodes."""
    parts = [_lift(p) for p in parts]
    for p in parts:
        if p.value.ndim != 1:
            raise DimensionError(f"concat: expected 1-D parts, got {p.shape}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def vjp(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return Node(np.concatenate([p.value for p in parts]), "concat", parts, vjp)


def gather(x, index) -> Node:
    """Row indexing ``x[index]`` along axis 0."""
    x = _lift(x)
    idx = np.asarray(index, dtype=np.int64)
    src = x.shape

    def vjp(g):
        full = np.zeros(src)
        np.add.at(full, idx, g)
        return (full,)

    return Node(x.value[idx], "gather", (x,), vjp)


def sum_(x, axis: int | None = None) -> Node:
    x = _lift(x)
    src = x.shape
    if axis is None:
        return Node(x.value.sum(), "sum", (x,), lambda g: (np.broadcast_to(g, src).copy(),))
    ax = axis % x.value.ndim

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, ax), src).copy(),)

    return Node(x.value.sum(axis=ax), "sum", (x,), vjp)


def mean(x, axis: int | None = None) -> Node:
    x = _lift(x)
    n = x.value.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis), 1.0 / n)


def logsumexp(x) -> Node:
    """Log-sum-exp over the last axis."""
    x = _lift(x)
    v = x.value
    m = v.max(axis=-1, keepdims=True)
    out = (m + np.log(np.exp(v - m).sum(axis=-1, keepdims=True)))[..., 0]

    def vjp(g):
        return (g[..., None] * np.exp(v - out[..., None]),)

    return Node(out, "logsumexp", (x,), vjp)


def log_softmax(x) -> Node:
    x = _lift(x)
    return sub(x, expand_last(logsumexp(x), x.shape[-1]))


def l2sq(x) -> Node:
    """Squared L2 norm over all entries."""
    x = _lift(x)
    v = x.value
    return Node(np.sum(v * v), "l2sq", (x,), lambda g: (2.0 * g * v,))


def dot(a, b) -> Node:
    return sum_(mul(a, b))


def stop_grad(x) -> Node:
    """Same value; gradient never flows to ``x`` through this node."""
    x = _lift(x)
    return Node(x.value, "stop_grad", (x,), None, stop=True)


def forward(root: Node) -> np.ndarray:
    """Value of ``root``. Graphs evaluate eagerly, so this is a lookup."""
    return root.value


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if not node.stop:
            for parent in node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(root: Node, wrt: Sequence[Node] | None = None) -> dict[Node, np.ndarray]:
    """Gradients of scalar ``root`` with respect to its differentiable leaves.

    Returns a mapping from each leaf reached (or each node in ``wrt``) to its
    gradient. Leaves that ``root`` does not depend on get zeros when listed in
    ``wrt``.
    """
    if root.value.ndim != 0 and root.value.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    leaves: dict[int, Node] = {}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None) if node.inputs else grads.get(id(node))
        if g is None:
            continue
        if not node.inputs:
            leaves[id(node)] = node
            continue
        if node.stop or node.vjp is None:
            continue
        for parent, pg in zip(node.inputs, node.vjp(g)):
            if not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = np.asarray(pg, dtype=np.float64)
    out = {n: grads[i] for i, n in leaves.items()}
    if wrt is not None:
        out = {n: out.get(n, np.zeros_like(n.value)) for n in wrt}
    return out


def grad(fn: Callable[..., Node], *values) -> tuple[np.ndarray, ...]:
    """Evaluate ``fn`` on fresh leaves built from ``values``; return (value, grads)."""
    leaves = [leaf(v) for v in values]
    root = fn(*leaves)
    g = backward(root, wrt=leaves)
    return (float(root.value),) + tuple(g[n] for n in leaves)
