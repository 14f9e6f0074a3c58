"""Tensor type and the reverse-mode differentiation driver.

Every operation is an :class:`Op` with a numpy ``forward`` and a ``vjp`` that
is itself written with tensor operations.  Running the vjps with recording
enabled (``create_graph=True``) therefore produces a differentiable graph of
the gradient, which is what gradient penalties need.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Any, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent with an operation."""


class NonScalarRootError(ValueError):
    """Raised when differentiating a root that is not a scalar."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def set_grad_enabled(flag: bool):
    prev = grad_enabled()
    _state.enabled = flag
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    return set_grad_enabled(False)


class Op:
    """A primitive operation.

    Subclasses implement ``forward(*arrays, **attrs) -> ndarray`` and
    ``vjp(g, out, inputs, **attrs) -> tuple`` returning one tensor (or None
    for "no gradient") per input.
    """

    name = "op"

    @staticmethod
    def forward(*arrays, **attrs):
        raise NotImplementedError

    @staticmethod
    def vjp(g, out, inputs, **attrs):
        raise NotImplementedError


class Node:
    __slots__ = ("op", "inputs", "attrs")

    def __init__(self, op: type[Op], inputs: tuple["Tensor", ...], attrs: dict):
        self.op = op
        self.inputs = inputs
        self.attrs = attrs


class Tensor:
    """Dense float64 array with an optional link to the op that produced it."""

    __slots__ = ("data", "requires_grad", "node", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.name = name

    # -- array-like surface -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4, threshold=8)}{grad}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators (bound in ops.py to avoid a circular import) ------------
    def __add__(self, other):
        return _ops().add(self, other)

    def __radd__(self, other):
        return _ops().add(other, self)

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    def __rmul__(self, other):
        return _ops().mul(other, self)

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __rtruediv__(self, other):
        return _ops().div(other, self)

    def __neg__(self):
        return _ops().neg(self)

    def __pow__(self, p):
        return _ops().power(self, p)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def __rmatmul__(self, other):
        return _ops().matmul(other, self)

    def __getitem__(self, key):
        return _ops().index(self, key)

    def sum(self, axis=None, keepdims=False):
        return _ops().sum(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return _ops().max(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _ops().transpose(self, axes or None)

    @property
    def T(self):
        return _ops().transpose(self, None)


def _ops():
    from kernreg.autodiff import ops

    return ops


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply(op: type[Op], *inputs: Any, **attrs) -> Tensor:
    """Run ``op`` eagerly and, if recording, attach a graph node to the result."""
    xs = tuple(as_tensor(x) for x in inputs)
    try:
        out = op.forward(*(x.data for x in xs), **attrs)
    except ShapeError as exc:
        raise ShapeError(f"{op.name}: {exc}") from None
    except ValueError as exc:
        shapes = ", ".join(str(x.shape) for x in xs)
        raise ShapeError(f"{op.name}: inputs with shapes ({shapes}): {exc}") from None
    t = Tensor(out)
    if grad_enabled() and any(x.requires_grad for x in xs):
        t.requires_grad = True
        t.node = Node(op, xs, attrs)
    return t


def _topological_order(roots: Sequence[Tensor]) -> list[Tensor]:
    """Non-leaf tensors reachable from ``roots``, every consumer before its inputs."""
    order: list[Tensor] = []
    visited: set[int] = set()
    for root in roots:
        if root.node is None or id(root) in visited:
            continue
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in visited:
                continue
            visited.add(id(t))
            stack.append((t, True))
            for x in t.node.inputs:
                if x.node is not None and x.requires_grad and id(x) not in visited:
                    stack.append((x, False))
    order.reverse()
    return order


def grad(
    outputs: Tensor | Sequence[Tensor],
    wrt: Tensor | Iterable[Tensor],
    grad_outputs: Tensor | Sequence[Tensor] | None = None,
    create_graph: bool = False,
) -> list[Tensor]:
    """Vector-Jacobian products of ``outputs`` with respect to ``wrt``.

    Without ``grad_outputs`` every output must be a scalar.  Tensors in
    ``wrt`` that the outputs do not depend on get a zero gradient.  With
    ``create_graph=True`` the returned gradients are themselves recorded and
    can be differentiated again.
    """
    outs = [outputs] if isinstance(outputs, Tensor) else list(outputs)
    targets = [wrt] if isinstance(wrt, Tensor) else list(wrt)
    if grad_outputs is None:
        for o in outs:
            if o.size != 1:
                raise NonScalarRootError(
                    f"cannot differentiate a root of shape {o.shape} without grad_outputs"
                )
        seeds = [Tensor(np.ones_like(o.data)) for o in outs]
    else:
        seeds = [as_tensor(g) for g in ([grad_outputs] if isinstance(grad_outputs, Tensor) else grad_outputs)]

    grads: dict[int, Tensor] = {}
    wanted = {id(t) for t in targets}

    def _accumulate(t: Tensor, g: Tensor) -> None:
        key = id(t)
        if key in grads:
            grads[key] = grads[key] + g
        else:
            grads[key] = g

    with set_grad_enabled(create_graph):
        for o, s in zip(outs, seeds):
            if o.requires_grad or id(o) in wanted:
                _accumulate(o, s)
        for t in _topological_order(outs):
            g = grads.get(id(t)) if id(t) in wanted else grads.pop(id(t), None)
            if g is None:
                continue
            node = t.node
            parts = node.op.vjp(g, t, node.inputs, **node.attrs)
            for x, gx in zip(node.inputs, parts):
                if gx is not None and (x.requires_grad or id(x) in wanted):
                    _accumulate(x, gx)

    result = []
    for t in targets:
        g = grads.get(id(t))
        result.append(g if g is not None else Tensor(np.zeros_like(t.data)))
    return result
