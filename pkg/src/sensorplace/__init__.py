"""Sparse optimal sensor placement by conditional gradient methods in measure space."""

from .design import (
    ACriterion,
    DCriterion,
    DesignMeasure,
    DomainError,
    WeightedACriterion,
    check_optimality,
    make_criterion,
)
from .fem import ConfigurationError, SolverError, build_mesh, forward
from .gcg import SolverConfig, SolverResult, StagnationError, solve

__all__ = [
    "ACriterion",
    "ConfigurationError",
    "DCriterion",
    "DesignMeasure",
    "DomainError",
    "SolverConfig",
    "SolverError",
    "SolverResult",
    "StagnationError",
    "WeightedACriterion",
    "build_mesh",
    "check_optimality",
    "forward",
    "make_criterion",
    "solve",
]
__version__ = "0.1.0"
