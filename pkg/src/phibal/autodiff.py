"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every operation builds a `Node` holding the forward value (a numpy array),
references to its parent nodes, and one vector-Jacobian closure per parent.
`backward()` replays the graph in reverse topological order and accumulates
adjoints via the chain rule. The engine is deliberately small: first-order
gradients only, float64 only, single-threaded per graph.

`stop_gradient` is a first-class primitive: it copies a node's value into a
fresh constant so no adjoint ever reaches the original subgraph.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable

import numpy as np

__all__ = [
    "Node",
    "ShapeError",
    "NonFiniteError",
    "set_checked",
    "is_checked",
    "constant",
    "parameter",
    "stop_gradient",
    "matmul",
    "transpose",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "silu",
    "softmax_rows",
    "index_select",
    "concat",
    "backward",
    "gradients",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the primitive that raised."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf value was produced while checked mode is enabled."""


_CHECKED = False


def set_checked(enabled: bool) -> None:
    """Toggle NaN/Inf guards on node construction and every primitive output."""
    global _CHECKED
    _CHECKED = bool(enabled)


def is_checked() -> bool:
    return _CHECKED


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


def _guard(value: np.ndarray, op: str) -> None:
    if _CHECKED and not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced a non-finite value")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


_UID = itertools.count()


class Node:
    """One value in the computation graph.

    Attributes:
        value: forward result, float64 numpy array (scalars have shape ()).
        grad: adjoint accumulated by backward(), or None before any backward.
        requires_grad: False for constants and everything behind stop_gradient.

    Nodes carry a creation counter; backward replays reachable nodes in
    descending creation order, which is a valid reverse topological order
    because parents always exist before their children. Using creation order
    (rather than a traversal-dependent sort) keeps gradient accumulation
    order, and therefore bit patterns, independent of unrelated graph parts.
    """

    __slots__ = ("value", "grad", "op", "requires_grad", "uid", "_parents", "_vjps")

    def __init__(
        self,
        value,
        parents: tuple[Node, ...] = (),
        vjps: tuple[Callable[[np.ndarray], np.ndarray], ...] = (),
        requires_grad: bool | None = None,
        op: str = "leaf",
    ) -> None:
        self.value = _as_array(value)
        _guard(self.value, op)
        self.grad: np.ndarray | None = None
        self.op = op
        self.uid = next(_UID)
        # Parents that cannot receive gradients are dropped so backward never
        # walks into dead subgraphs.
        kept = tuple(
            (p, vjp) for p, vjp in zip(parents, vjps) if p.requires_grad
        ) if parents else ()
        self._parents = tuple(p for p, _ in kept)
        self._vjps = tuple(v for _, v in kept)
        if requires_grad is None:
            requires_grad = bool(self._parents)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other) -> Node:
        other = _wrap(other)
        out = self.value + other.value
        return Node(
            out,
            (self, other),
            (
                lambda g, s=self.shape: _unbroadcast(g, s),
                lambda g, s=other.shape: _unbroadcast(g, s),
            ),
            op="add",
        )

    __radd__ = __add__

    def __sub__(self, other) -> Node:
        other = _wrap(other)
        out = self.value - other.value
        return Node(
            out,
            (self, other),
            (
                lambda g, s=self.shape: _unbroadcast(g, s),
                lambda g, s=other.shape: _unbroadcast(-g, s),
            ),
            op="sub",
        )

    def __rsub__(self, other) -> Node:
        return _wrap(other) - self

    def __mul__(self, other) -> Node:
        if isinstance(other, (int, float)):
            return self.scale(float(other))
        other = _wrap(other)
        out = self.value * other.value
        return Node(
            out,
            (self, other),
            (
                lambda g, o=other.value, s=self.shape: _unbroadcast(g * o, s),
                lambda g, o=self.value, s=other.shape: _unbroadcast(g * o, s),
            ),
            op="mul",
        )

    __rmul__ = __mul__

    def __neg__(self) -> Node:
        return self.scale(-1.0)

    def __pow__(self, exponent: float) -> Node:
        c = float(exponent)
        out = self.value**c
        return Node(
            out,
            (self,),
            (lambda g, x=self.value: g * c * x ** (c - 1.0),),
            op="pow",
        )

    def __matmul__(self, other) -> Node:
        return matmul(self, _wrap(other))

    def scale(self, c: float) -> Node:
        """Multiply by a python scalar (the scalar is never differentiated)."""
        return Node(self.value * c, (self,), (lambda g: g * c,), op="scalar_mul")

    # -- elementwise functions ---------------------------------------------

    def exp(self) -> Node:
        out = np.exp(self.value)
        return Node(out, (self,), (lambda g, y=out: g * y,), op="exp")

    def log(self) -> Node:
        out = np.log(self.value)
        return Node(out, (self,), (lambda g, x=self.value: g / x,), op="log")

    def tanh(self) -> Node:
        out = np.tanh(self.value)
        return Node(out, (self,), (lambda g, y=out: g * (1.0 - y * y),), op="tanh")

    def sigmoid(self) -> Node:
        # tanh form is stable for large |x| in both directions.
        out = 0.5 * (1.0 + np.tanh(0.5 * self.value))
        return Node(out, (self,), (lambda g, y=out: g * y * (1.0 - y),), op="sigmoid")

    def silu(self) -> Node:
        s = 0.5 * (1.0 + np.tanh(0.5 * self.value))
        out = self.value * s
        return Node(
            out,
            (self,),
            (lambda g, x=self.value, s=s: g * (s * (1.0 + x * (1.0 - s))),),
            op="silu",
        )

    # -- reductions ----------------------------------------------------------

    def sum(self, axis: int | None = None, keepdims: bool = False) -> Node:
        out = self.value.sum(axis=axis, keepdims=keepdims)

        def vjp(g, shape=self.shape):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape).copy()

        return Node(out, (self,), (vjp,), op="sum")

    def mean(self, axis: int | None = None, keepdims: bool = False) -> Node:
        n = self.value.size if axis is None else self.value.shape[axis]
        out = self.value.mean(axis=axis, keepdims=keepdims)

        def vjp(g, shape=self.shape, n=n):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g / n, shape).copy()

        return Node(out, (self,), (vjp,), op="mean")

    @property
    def T(self) -> Node:
        return transpose(self)

    # -- backward ------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate adjoints into `.grad` for every reachable grad node.

        The root must be a scalar; traversal is in descending creation order
        over the reachable subgraph.
        """
        if self.value.size != 1:
            raise ShapeError(
                f"backward: root must be a scalar node, got shape {self.shape}"
            )
        order = _reachable(self)
        order.sort(key=lambda n: n.uid, reverse=True)
        self.grad = np.ones_like(self.value)
        for node in order:
            g = node.grad
            if g is None:
                continue
            for parent, vjp in zip(node._parents, node._vjps):
                contrib = vjp(g)
                if parent.grad is None:
                    parent.grad = np.zeros(parent.shape, dtype=np.float64)
                parent.grad += contrib


def _reachable(root: Node) -> list[Node]:
    seen: set[int] = {id(root)}
    out = [root]
    stack = [root]
    while stack:
        node = stack.pop()
        for parent in node._parents:
            if id(parent) not in seen:
                seen.add(id(parent))
                out.append(parent)
                stack.append(parent)
    return out


def _wrap(x) -> Node:
    return x if isinstance(x, Node) else Node(x, requires_grad=False, op="const")


# -- constructors -------------------------------------------------------------


def constant(data) -> Node:
    """A node that never receives gradients."""
    return Node(data, requires_grad=False, op="const")


def parameter(data) -> Node:
    """A trainable leaf."""
    return Node(data, requires_grad=True, op="param")


def stop_gradient(node: Node) -> Node:
    """Identical forward value; contributes zero adjoint to everything upstream."""
    return Node(node.value, requires_grad=False, op="stop_gradient")


# -- non-method primitives -----------------------------------------------------


def matmul(a: Node, b: Node) -> Node:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    out = a.value @ b.value
    return Node(
        out,
        (a, b),
        (
            lambda g, bv=b.value: g @ bv.T,
            lambda g, av=a.value: av.T @ g,
        ),
        op="matmul",
    )


def transpose(a: Node) -> Node:
    if a.ndim != 2:
        raise ShapeError(f"transpose: need a matrix, got shape {a.shape}")
    return Node(a.value.T, (a,), (lambda g: g.T,), op="transpose")


def exp(a: Node) -> Node:
    return a.exp()


def log(a: Node) -> Node:
    return a.log()


def tanh(a: Node) -> Node:
    return a.tanh()


def sigmoid(a: Node) -> Node:
    return a.sigmoid()


def silu(a: Node) -> Node:
    return a.silu()


def softmax_rows(a: Node) -> Node:
    """Row-wise softmax of a matrix, stabilized by row-max subtraction."""
    if a.ndim != 2:
        raise ShapeError(f"softmax_rows: need a matrix, got shape {a.shape}")
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g, y=out):
        return y * (g - (g * y).sum(axis=1, keepdims=True))

    return Node(out, (a,), (vjp,), op="softmax_rows")


def index_select(a: Node, indices, axis: int = 0) -> Node:
    """Gather rows (axis=0) or columns (axis=1). Duplicate indices allowed."""
    idx = np.asarray(indices, dtype=np.intp)
    if axis not in (0, 1) or axis >= a.ndim:
        raise ShapeError(f"index_select: axis {axis} invalid for shape {a.shape}")
    out = np.take(a.value, idx, axis=axis)

    def vjp(g, shape=a.shape):
        full = np.zeros(shape, dtype=np.float64)
        if axis == 0:
            np.add.at(full, idx, g)
        else:
            np.add.at(full, (slice(None), idx), g)
        return full

    return Node(out, (a,), (vjp,), op="index_select")


def concat(nodes: Iterable[Node], axis: int = 0) -> Node:
    parts = list(nodes)
    if not parts:
        raise ShapeError("concat: need at least one node")
    out = np.concatenate([p.value for p in parts], axis=axis)
    offsets = np.cumsum([0] + [p.value.shape[axis] for p in parts])

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]

        return vjp

    return Node(
        out,
        tuple(parts),
        tuple(make_vjp(i) for i in range(len(parts))),
        op="concat",
    )


def backward(root: Node) -> None:
    root.backward()


def gradients(root: Node, leaves: Iterable[Node]) -> dict[Node, np.ndarray]:
    """Run backward and return {leaf: gradient} for the requested leaves.

    Leaves that the root does not depend on (including anything behind
    stop_gradient) map to zero arrays.
    """
    root.backward()
    out = {}
    for leaf in leaves:
        g = leaf.grad
        out[leaf] = np.zeros(leaf.shape) if g is None else g
    return out
