"""Reverse-mode automatic differentiation over dense float64 arrays.

Graphs are built define-by-run: every operation on a :class:`Node` returns a
new node that remembers its parents and a vector-Jacobian product (VJP).
The VJPs are themselves written in terms of node operations, so calling
:func:`grad` with ``create_graph=True`` records the adjoint computation and
the result can be differentiated again. This is what lets the outer
meta-learning update see through the inner gradient steps.

Broadcasting is deliberately narrow. Two operands of a binary op must either
have the same shape, one must be a 0-d scalar, or one must be a vector that
is added to every row of a matrix. Anything else raises
:class:`~timeflow.errors.DimensionError`.
"""

from __future__ import annotations

import contextlib
import contextvars
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

__all__ = [
    "Node",
    "Tape",
    "variable",
    "constant",
    "detach",
    "no_grad",
    "grad",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "relu",
    "sin",
    "cos",
    "sum_all",
    "sum_rows",
    "expand",
    "gather_rows",
    "scatter_rows",
    "mse",
    "weighted_sse",
]

_recording = contextvars.ContextVar("timeflow_recording", default=True)
_active_tape = contextvars.ContextVar("timeflow_tape", default=None)
# ids of nodes lying on a path from a differentiation target to the root;
# None outside a reverse pass
_relevant = contextvars.ContextVar("timeflow_relevant", default=None)
_ids = itertools.count()

VJP = Callable[["Node"], Sequence["Node | None"]]


def _frozen(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    arr.flags.writeable = False
    return arr


class Node:
    """A value in the computation graph.

    Leaves are created with :func:`variable` (differentiable) or
    :func:`constant`. Interior nodes come from the op functions below or the
    overloaded arithmetic operators.
    """

    __slots__ = ("id", "op", "parents", "value", "requires_grad", "_vjp")
    __array_priority__ = 1000

    def __init__(self, value, op="const", parents=(), vjp=None, requires_grad=False, _owned=False):
        self.id = next(_ids)
        self.op = op
        self.parents = tuple(parents)
        if _owned:
            # op outputs are fresh arrays or views of already frozen values
            value = np.asarray(value, dtype=np.float64)
            value.flags.writeable = False
            self.value = value
        else:
            self.value = _frozen(value)
        self.requires_grad = requires_grad
        self._vjp = vjp
        tape = _active_tape.get()
        if tape is not None:
            tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(other, self)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("division is only supported by Python scalars")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class Tape:
    """Append-only record of every node created while the tape is active.

    >>> with Tape() as tape:
    ...     x = variable(3.0)
    ...     y = x * x
    >>> tape.backward(y, [x])[x.id].item()
    6.0
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, root: Node, wrt: Iterable[Node], create_graph: bool = False) -> dict[int, Node]:
        wrt = list(wrt)
        return {n.id: g for n, g in zip(wrt, grad(root, wrt, create_graph=create_graph))}

    def truncate(self, length: int = 0) -> None:
        del self.nodes[length:]


def variable(value) -> Node:
    """Differentiable leaf. The value is copied, so later in-place updates of
    the source array do not leak into the graph."""
    return Node(value, op="leaf", requires_grad=True)


def constant(value) -> Node:
    return value if isinstance(value, Node) and not value.requires_grad else Node(
        value.value if isinstance(value, Node) else value
    )


def detach(node: Node) -> Node:
    return Node(node.value, _owned=True)


@contextlib.contextmanager
def no_grad():
    token = _recording.set(False)
    try:
        yield
    finally:
        _recording.reset(token)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _wants(node: Node) -> bool:
    if not node.requires_grad:
        return False
    relevant = _relevant.get()
    return relevant is None or node.id in relevant


def _make(value, op: str, parents: Sequence[Node], vjp: VJP) -> Node:
    if _recording.get() and any(p.requires_grad for p in parents):
        return Node(value, op, parents, vjp, True, _owned=True)
    return Node(value, op, _owned=True)


# --------------------------------------------------------------------------
# broadcasting helpers

def _check_broadcast(a_shape, b_shape, op):
    if a_shape == b_shape or len(a_shape) == 0 or len(b_shape) == 0:
        return
    if len(a_shape) == 2 and len(b_shape) == 1 and a_shape[1] == b_shape[0]:
        return
    if len(b_shape) == 2 and len(a_shape) == 1 and b_shape[1] == a_shape[0]:
        return
    raise DimensionError(f"{op}: incompatible shapes {a_shape} and {b_shape}")


def _unbroadcast(g: Node, shape) -> Node:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return sum_all(g)
    if len(shape) == 1 and g.ndim == 2:
        return sum_rows(g)
    raise DimensionError(f"cannot reduce gradient of shape {g.shape} to {shape}")


# --------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _check_broadcast(a.shape, b.shape, "add")

    def vjp(g):
        ga = _unbroadcast(g, a.shape) if _wants(a) else None
        gb = _unbroadcast(g, b.shape) if _wants(b) else None
        return ga, gb

    return _make(a.value + b.value, "add", (a, b), vjp)


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _check_broadcast(a.shape, b.shape, "sub")

    def vjp(g):
        ga = _unbroadcast(g, a.shape) if _wants(a) else None
        gb = _unbroadcast(neg(g), b.shape) if _wants(b) else None
        return ga, gb

    return _make(a.value - b.value, "sub", (a, b), vjp)


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _check_broadcast(a.shape, b.shape, "mul")

    def vjp(g):
        ga = _unbroadcast(mul(g, b), a.shape) if _wants(a) else None
        gb = _unbroadcast(mul(g, a), b.shape) if _wants(b) else None
        return ga, gb

    return _make(a.value * b.value, "mul", (a, b), vjp)


def scale(a, c: float) -> Node:
    a = _as_node(a)
    c = float(c)
    return _make(a.value * c, "scale", (a,), lambda g: (scale(g, c),))


def neg(a) -> Node:
    return scale(a, -1.0)


# --------------------------------------------------------------------------
# linear algebra and shape ops

def matmul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def vjp(g):
        ga = matmul(g, transpose(b)) if _wants(a) else None
        gb = matmul(transpose(a), g) if _wants(b) else None
        return ga, gb

    return _make(a.value @ b.value, "matmul", (a, b), vjp)


def transpose(a) -> Node:
    a = _as_node(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(np.ascontiguousarray(a.value.T), "transpose", (a,), lambda g: (transpose(g),))


def reshape(a, shape) -> Node:
    a = _as_node(a)
    old = a.shape
    return _make(a.value.reshape(shape), "reshape", (a,), lambda g: (reshape(g, old),))


def sum_all(a) -> Node:
    a = _as_node(a)
    shape = a.shape
    return _make(np.sum(a.value), "sum", (a,), lambda g: (expand(g, shape),))


def sum_rows(a) -> Node:
    """Column sums of a matrix: ``(m, n) -> (n,)``."""
    a = _as_node(a)
    if a.ndim != 2:
        raise DimensionError(f"sum_rows expects a matrix, got shape {a.shape}")
    shape = a.shape
    return _make(a.value.sum(axis=0), "sum_rows", (a,), lambda g: (expand(g, shape),))


def expand(a, shape) -> Node:
    """Broadcast a scalar or row vector up to ``shape``; adjoint of the sums."""
    a = _as_node(a)
    shape = tuple(shape)
    _check_broadcast(shape, a.shape, "expand")
    src = a.shape
    return _make(np.broadcast_to(a.value, shape).copy(), "expand", (a,), lambda g: (_unbroadcast(g, src),))


def gather_rows(a, index) -> Node:
    """Row lookup ``a[index]`` for a matrix ``a`` and an integer index vector."""
    a = _as_node(a)
    index = np.asarray(index, dtype=np.intp)
    if a.ndim != 2:
        raise DimensionError(f"gather_rows expects a matrix, got shape {a.shape}")
    m = a.shape[0]
    return _make(a.value[index], "gather_rows", (a,), lambda g: (scatter_rows(g, index, m),))


def scatter_rows(a, index, num_rows: int) -> Node:
    """Sum rows of ``a`` into ``num_rows`` buckets given by ``index``."""
    a = _as_node(a)
    index = np.asarray(index, dtype=np.intp)
    out = np.zeros((num_rows, a.shape[1]))
    np.add.at(out, index, a.value)
    return _make(out, "scatter_rows", (a,), lambda g: (gather_rows(g, index),))


# --------------------------------------------------------------------------
# nonlinearities

def relu(a) -> Node:
    a = _as_node(a)
    # subgradient at exactly 0 is 0
    mask = Node((a.value > 0).astype(np.float64))
    return _make(a.value * mask.value, "relu", (a,), lambda g: (mul(g, mask),))


def sin(a) -> Node:
    a = _as_node(a)
    return _make(np.sin(a.value), "sin", (a,), lambda g: (mul(g, cos(a)),))


def cos(a) -> Node:
    a = _as_node(a)
    return _make(np.cos(a.value), "cos", (a,), lambda g: (neg(mul(g, sin(a))),))


# --------------------------------------------------------------------------
# losses

def mse(pred, target) -> Node:
    """Mean squared error between a prediction node and a fixed target."""
    pred = _as_node(pred)
    target = np.asarray(target.value if isinstance(target, Node) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: prediction shape {pred.shape} != target shape {target.shape}")
    n = pred.value.size
    if n == 0:
        raise ContractError("mse over an empty coordinate set")
    diff = sub(pred, Node(target))
    return scale(sum_all(mul(diff, diff)), 1.0 / n)


def weighted_sse(pred, target, weights) -> Node:
    """``sum(weights * (pred - target)**2)`` with constant target and weights."""
    pred = _as_node(pred)
    target = np.asarray(target, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if pred.shape != target.shape or pred.shape != weights.shape:
        raise DimensionError(
            f"weighted_sse: shapes {pred.shape}, {target.shape}, {weights.shape} differ"
        )
    diff = sub(pred, Node(target))
    return sum_all(mul(mul(diff, diff), Node(weights)))


# --------------------------------------------------------------------------
# reverse pass

def _topological_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for parent in reversed(node.parents):
            if parent.requires_grad and parent.id not in seen:
                stack.append((parent, False))
    return order


def grad(root: Node, wrt: Sequence[Node], create_graph: bool = False) -> list[Node]:
    """Adjoints of a scalar ``root`` with respect to each node in ``wrt``.

    Nodes in ``wrt`` that ``root`` does not depend on get a zero adjoint.
    With ``create_graph=True`` the returned adjoints are differentiable.
    """
    if root.value.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    wanted = {n.id for n in wrt}
    adjoints: dict[int, Node] = {}
    order = _topological_order(root) if root.requires_grad else []
    # restrict the sweep to nodes that depend on some target
    relevant: set[int] = set()
    for node in order:
        if node.id in wanted or any(p.id in relevant for p in node.parents):
            relevant.add(node.id)
    if root.id in relevant:
        adjoints[root.id] = Node(np.ones_like(root.value))
    rec_token = _recording.set(bool(create_graph))
    rel_token = _relevant.set(relevant)
    try:
        for node in reversed(order):
            g = adjoints.get(node.id)
            if g is None or node._vjp is None:
                continue
            if node.id not in wanted:
                del adjoints[node.id]
            for parent, pg in zip(node.parents, node._vjp(g)):
                if pg is None or parent.id not in relevant:
                    continue
                prev = adjoints.get(parent.id)
                adjoints[parent.id] = pg if prev is None else add(prev, pg)
    finally:
        _relevant.reset(rel_token)
        _recording.reset(rec_token)
    out = []
    for n in wrt:
        g = adjoints.get(n.id)
        if g is None:
            g = Node(np.zeros_like(n.value))
        elif not create_graph and g.requires_grad:
            g = detach(g)
        out.append(g)
    return out


def backward(tape: Tape | None, root: Node, wrt: Iterable[Node], create_graph: bool = False) -> dict[int, Node]:
    """Map from node id to adjoint, mirroring :meth:`Tape.backward`."""
    wrt = list(wrt)
    return {n.id: g for n, g in zip(wrt, grad(root, wrt, create_graph=create_graph))}
