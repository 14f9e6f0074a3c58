"""Reverse-mode automatic differentiation over float64 numpy arrays."""

from kernreg.autodiff import ops
from kernreg.autodiff.graph import ComputeGraph, GraphShapeError, evaluate, param_gradient, trace
from kernreg.autodiff.tensor import (
    NonScalarRootError,
    Op,
    ShapeError,
    Tensor,
    apply,
    as_tensor,
    grad,
    grad_enabled,
    no_grad,
    set_grad_enabled,
)

__all__ = [
    "ComputeGraph",
    "GraphShapeError",
    "NonScalarRootError",
    "Op",
    "ShapeError",
    "Tensor",
    "apply",
    "as_tensor",
    "evaluate",
    "grad",
    "grad_enabled",
    "no_grad",
    "ops",
    "param_gradient",
    "set_grad_enabled",
    "trace",
]
