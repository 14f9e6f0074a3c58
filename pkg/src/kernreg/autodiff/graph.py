"""Recorded computation graphs that can be replayed on new leaf bindings.

A :class:`ComputeGraph` is a topologically ordered list of primitive nodes
captured from an eager computation.  Replaying it with tensors re-records
the computation, which is how :meth:`ComputeGraph.differentiate` returns a
graph of the gradient over the same leaves (and can be applied twice).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from kernreg.autodiff.tensor import (
    NonScalarRootError,
    Op,
    ShapeError,
    Tensor,
    apply,
    grad,
    no_grad,
)


class GraphShapeError(ShapeError):
    """Shape failure during replay, naming the offending node."""

    def __init__(self, index: int, op_name: str, detail: str):
        super().__init__(f"node {index} ({op_name}): {detail}")
        self.index = index
        self.op_name = op_name


@dataclass(frozen=True)
class GraphNode:
    op: type[Op] | None  # None for leaves and constants
    parents: tuple[int, ...]
    attrs: dict
    kind: str  # "param", "input", "const" or "op"
    name: str | None = None
    value: np.ndarray | None = None  # constants; leaves keep their trace-time value


class ComputeGraph:
    """Replayable graph with named parameter and input leaves."""

    def __init__(
        self,
        outputs: Tensor | list[Tensor],
        params: Mapping[str, Tensor] | None = None,
        inputs: Mapping[str, Tensor] | None = None,
    ):
        params = dict(params or {})
        inputs = dict(inputs or {})
        self.single_output = isinstance(outputs, Tensor)
        outs = [outputs] if self.single_output else list(outputs)
        leaf_ids: dict[int, tuple[str, str]] = {}
        for name, t in params.items():
            leaf_ids[id(t)] = ("param", name)
        for name, t in inputs.items():
            if id(t) in leaf_ids:
                raise ValueError(f"leaf {name!r} registered twice")
            leaf_ids[id(t)] = ("input", name)

        nodes: list[GraphNode] = []
        index: dict[int, int] = {}
        # leaves first, in declaration order, so every graph shares the leaf layout
        for name, t in list(params.items()) + list(inputs.items()):
            kind, _ = leaf_ids[id(t)]
            index[id(t)] = len(nodes)
            nodes.append(GraphNode(None, (), {}, kind, name, value=t.data))

        def visit(root: Tensor) -> None:
            stack: list[tuple[Tensor, bool]] = [(root, False)]
            while stack:
                t, expanded = stack.pop()
                if id(t) in index:
                    continue
                if t.node is None:
                    index[id(t)] = len(nodes)
                    nodes.append(GraphNode(None, (), {}, "const", value=t.data))
                    continue
                if expanded:
                    index[id(t)] = len(nodes)
                    nodes.append(
                        GraphNode(t.node.op, tuple(index[id(x)] for x in t.node.inputs), t.node.attrs, "op")
                    )
                    continue
                stack.append((t, True))
                for x in reversed(t.node.inputs):
                    if id(x) not in index:
                        stack.append((x, False))

        for o in outs:
            visit(o)
        self.nodes = nodes
        self.output_index = [index[id(o)] for o in outs]
        self.param_names = list(params)
        self.input_names = list(inputs)

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def leaf_names(self) -> list[str]:
        return self.param_names + self.input_names

    def _check_bindings(self, bindings: Mapping) -> None:
        missing = [n for n in self.leaf_names if n not in bindings]
        if missing:
            raise KeyError(f"unbound leaves: {missing}")

    def replay(self, bindings: Mapping[str, Tensor]) -> list[Tensor]:
        """Re-execute with tensor bindings, recording a fresh tape."""
        self._check_bindings(bindings)
        values: list[Tensor] = []
        for i, node in enumerate(self.nodes):
            if node.kind in ("param", "input"):
                v = bindings[node.name]
                values.append(v if isinstance(v, Tensor) else Tensor(v))
            elif node.kind == "const":
                values.append(Tensor(node.value))
            else:
                try:
                    values.append(apply(node.op, *(values[p] for p in node.parents), **node.attrs))
                except ShapeError as exc:
                    raise GraphShapeError(i, node.op.name, str(exc)) from None
        return [values[i] for i in self.output_index]

    def evaluate(self, bindings: Mapping[str, object]) -> Tensor | list[Tensor]:
        """Value of the output node(s) for the given leaf bindings."""
        with no_grad():
            outs = self.replay({k: Tensor(v) for k, v in bindings.items()})
        return outs[0] if self.single_output else outs

    def param_gradient(self, bindings: Mapping[str, object]) -> dict[str, Tensor]:
        """d(root)/d(param) for every parameter leaf; zero for unused ones."""
        if not self.single_output:
            raise NonScalarRootError("param_gradient needs a single scalar output")
        leaves = {
            k: Tensor(bindings[k], requires_grad=k in self.param_names) for k in self.leaf_names
        }
        (root,) = self.replay(leaves)
        if root.size != 1:
            raise NonScalarRootError(f"root has shape {root.shape}; a scalar is required")
        gs = grad(root, [leaves[k] for k in self.param_names])
        return {k: g for k, g in zip(self.param_names, gs)}

    def differentiate(self, wrt: list[str] | None = None) -> "ComputeGraph":
        """Graph over the same leaves whose outputs are d(root)/d(leaf) for ``wrt``.

        The gradient is recorded at the leaf values seen when this graph was
        built; data-dependent patterns (ReLU masks, argmax selections) are
        nodes of the new graph and are recomputed on every replay.
        """
        if not self.single_output:
            raise NonScalarRootError("differentiate needs a single scalar output")
        wrt = list(self.param_names if wrt is None else wrt)
        unknown = [n for n in wrt if n not in self.leaf_names]
        if unknown:
            raise KeyError(f"unknown leaves: {unknown}")
        leaves = {
            node.name: Tensor(node.value, requires_grad=True)
            for node in self.nodes
            if node.kind in ("param", "input")
        }
        (root,) = self.replay(leaves)
        if root.size != 1:
            raise NonScalarRootError(f"root has shape {root.shape}; a scalar is required")
        gs = grad(root, [leaves[k] for k in wrt], create_graph=True)
        return ComputeGraph(
            gs[0] if len(gs) == 1 else gs,
            params={k: leaves[k] for k in self.param_names},
            inputs={k: leaves[k] for k in self.input_names},
        )


def trace(fn: Callable[..., Tensor], params: Mapping[str, object], inputs: Mapping[str, object] | None = None) -> ComputeGraph:
    """Record ``fn(**params, **inputs)`` into a :class:`ComputeGraph`."""
    inputs = inputs or {}
    p = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    x = {k: Tensor(v, requires_grad=True, name=k) for k, v in inputs.items()}
    out = fn(**p, **x)
    return ComputeGraph(out, params=p, inputs=x)


def evaluate(graph: ComputeGraph, bindings: Mapping[str, object]) -> Tensor:
    return graph.evaluate(bindings)


def param_gradient(graph: ComputeGraph, bindings: Mapping[str, object]) -> dict[str, Tensor]:
    return graph.param_gradient(bindings)
