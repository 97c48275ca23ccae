"""Loping Steepest-Descent-Kaczmarz and related iterations for systems of ill-posed equations."""

from .core import (DataBlock, OperatorBlock, ParameterVector, ProblemSystem, RelaxationFunction,
                   XSpace, YSpace, add_noise, estimate_operator_norm, validate_adjoint)
from .solver import (IterationTrace, SolverConfig, StopReason, Variant, cgne_run, run)

__all__ = [
    "DataBlock", "IterationTrace", "OperatorBlock", "ParameterVector", "ProblemSystem",
    "RelaxationFunction", "SolverConfig", "StopReason", "Variant", "XSpace", "YSpace",
    "add_noise", "cgne_run", "estimate_operator_norm", "run", "validate_adjoint",
]

__version__ = "0.1.0"
