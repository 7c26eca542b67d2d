"""Reverse-mode differentiation over a Wengert tape of numpy array operations.

Operations executed inside ``with Tape() as tape:`` are appended to ``tape.nodes``
whenever one of their inputs requires a gradient. ``backward`` walks the list in
reverse and applies the adjoint rule registered for each operation in
``ADJOINTS``. Outside a tape, the same operations are plain numpy evaluation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class TapeError(RuntimeError):
    """Internal consistency failure of a recorded graph."""


class Tensor:
    __slots__ = ("value", "requires_grad", "grad", "name", "_node")
    # make numpy defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: Node | None = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)


@dataclass
class Node:
    op: str
    inputs: tuple
    out: Tensor
    attrs: dict = field(default_factory=dict)


_ACTIVE: list[Tape] = []


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> Tape:
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def replay(self) -> bool:
        """Re-evaluate every node from its recorded inputs; True if bitwise equal."""
        for node in self.nodes:
            args = [t.value for t in node.inputs]
            again = FORWARD[node.op](*args, **node.attrs)
            if not np.array_equal(again, node.out.value, equal_nan=True):
                return False
        return True


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _apply(op: str, *inputs, **attrs) -> Tensor:
    inputs = tuple(as_tensor(t) for t in inputs)
    out = Tensor(FORWARD[op](*[t.value for t in inputs], **attrs))
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(op, inputs, out, attrs)
        out._node = node
        _ACTIVE[-1].nodes.append(node)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _lse(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m


def _take_adjoint(g, node):
    (x,) = node.inputs
    full = np.zeros_like(x.value)
    np.add.at(full, node.attrs["index"], g)
    return (full,)


def _concat_adjoint(g, node):
    axis = node.attrs["axis"]
    sizes = [t.value.shape[axis] for t in node.inputs]
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


def _sum_adjoint(g, node):
    (x,) = node.inputs
    axis, keepdims = node.attrs["axis"], node.attrs["keepdims"]
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.value.shape).copy(),)


def _lse_adjoint(g, node):
    (x,) = node.inputs
    axis, keepdims = node.attrs["axis"], node.attrs["keepdims"]
    out = node.out.value
    if not keepdims:
        g = np.expand_dims(g, axis)
        out = np.expand_dims(out, axis)
    return (g * np.exp(x.value - out),)


FORWARD: dict[str, Callable] = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / b,
    "neg": lambda a: -a,
    "matmul": lambda a, b: a @ b,
    "transpose": lambda a: a.T,
    "exp": np.exp,
    "log": np.log,
    "tanh": np.tanh,
    "sum": lambda a, axis, keepdims: np.sum(a, axis=axis, keepdims=keepdims),
    "logsumexp": lambda a, axis, keepdims: (
        _lse(a, axis) if keepdims else np.squeeze(_lse(a, axis), axis=axis)
    ),
    "take": lambda a, index: a[index],
    "reshape": lambda a, shape: a.reshape(shape),
    "concat": lambda *xs, axis: np.concatenate(xs, axis=axis),
}

# Each rule maps (upstream gradient, node) to one gradient per input.
ADJOINTS: dict[str, Callable] = {
    "add": lambda g, n: (_unbroadcast(g, n.inputs[0].shape), _unbroadcast(g, n.inputs[1].shape)),
    "sub": lambda g, n: (_unbroadcast(g, n.inputs[0].shape), _unbroadcast(-g, n.inputs[1].shape)),
    "mul": lambda g, n: (
        _unbroadcast(g * n.inputs[1].value, n.inputs[0].shape),
        _unbroadcast(g * n.inputs[0].value, n.inputs[1].shape),
    ),
    "div": lambda g, n: (
        _unbroadcast(g / n.inputs[1].value, n.inputs[0].shape),
        _unbroadcast(-g * n.out.value / n.inputs[1].value, n.inputs[1].shape),
    ),
    "neg": lambda g, n: (-g,),
    "matmul": lambda g, n: (g @ n.inputs[1].value.T, n.inputs[0].value.T @ g),
    "transpose": lambda g, n: (g.T,),
    "exp": lambda g, n: (g * n.out.value,),
    "log": lambda g, n: (g / n.inputs[0].value,),
    "tanh": lambda g, n: (g * (1.0 - n.out.value**2),),
    "sum": _sum_adjoint,
    "logsumexp": _lse_adjoint,
    "take": _take_adjoint,
    "reshape": lambda g, n: (g.reshape(n.inputs[0].shape),),
    "concat": _concat_adjoint,
}


def register(op: str, forward: Callable, adjoint: Callable) -> None:
    """Add a primitive with its own forward rule and adjoint rule."""
    FORWARD[op] = forward
    ADJOINTS[op] = adjoint


def apply(op: str, *inputs, **attrs) -> Tensor:
    """Record a registered primitive."""
    return _apply(op, *inputs, **attrs)


def add(a, b):
    return _apply("add", a, b)


def sub(a, b):
    return _apply("sub", a, b)


def mul(a, b):
    return _apply("mul", a, b)


def div(a, b):
    return _apply("div", a, b)


def neg(a):
    return _apply("neg", a)


def matmul(a, b):
    return _apply("matmul", a, b)


def transpose(a):
    return _apply("transpose", a)


def exp(a):
    return _apply("exp", a)


def log(a):
    return _apply("log", a)


def tanh(a):
    return _apply("tanh", a)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    return _apply("sum", a, axis=axis, keepdims=keepdims)


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def logsumexp(a, axis, keepdims=True):
    return _apply("logsumexp", a, axis=axis, keepdims=keepdims)


def softmax(a, axis=-1):
    return exp(sub(a, logsumexp(a, axis=axis)))


def take(a, index):
    return _apply("take", a, index=index)


def reshape(a, shape):
    return _apply("reshape", a, shape=tuple(shape))


def concat(tensors, axis=0):
    return _apply("concat", *tensors, axis=axis)


def backward(tape: Tape, loss: Tensor, wrt=()) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(.) back through ``tape``.

    Returns the gradient of every leaf tensor that requires one, plus every
    tensor in ``wrt``, and sets their ``.grad``. Leaves the loss does not
    depend on get an all-zero gradient.
    """
    if loss.value.size != 1:
        raise TapeError("backward needs a scalar loss")
    position = {id(node): k for k, node in enumerate(tape.nodes)}
    if loss._node is None or id(loss._node) not in position:
        raise TapeError("loss was not produced on this tape")

    leaves: dict[int, Tensor] = {}
    for k, node in enumerate(tape.nodes):
        for t in node.inputs:
            if not t.requires_grad:
                continue
            if t._node is None:
                leaves[id(t)] = t
            elif position.get(id(t._node), k) >= k:
                raise TapeError(f"input of '{node.op}' node {k} was not recorded before it")

    for t in wrt:
        if t._node is not None:
            raise TapeError(f"{t!r} is not a leaf tensor")
        leaves.setdefault(id(t), t)

    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(tape.nodes):
        g = adj.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, ADJOINTS[node.op](g, node)):
            if gi is None or not t.requires_grad:
                continue
            prev = adj.get(id(t))
            adj[id(t)] = gi if prev is None else prev + gi

    grads = {}
    for key, leaf in leaves.items():
        g = adj.get(key)
        leaf.grad = np.zeros_like(leaf.value) if g is None else np.asarray(g, dtype=np.float64)
        grads[leaf] = leaf.grad
    return grads
