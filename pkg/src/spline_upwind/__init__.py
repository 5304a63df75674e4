"""
Space-time spline (isogeometric) solver with high-order upwind stabilization.

The time direction is discretised with splines like the space directions;
upwind terms built from high-order time derivatives make the system
(block) lower triangular in time, and a residual-driven weight switches
them off where the solution is smooth.
"""
__version__ = "0.1.0"

from .discretization import HeatDiscretization, TimeDiscretization, make_discretization
from .errors import (ConfigurationError, DataError, DomainError, GeometryError, ParameterError,
                     SolverError, SplineUpwindError, StabilizationError)
from .metrics import estimate_orders, overshoot_indicator, relative_l2_error
from .problems import ProblemSpec, get_problem
from .solver import METHODS, fixed_point_solve, solve
from .stabilization import StabilizationTable, ThetaField, compute_tables

__all__ = [
    "__version__",
    "TimeDiscretization",
    "HeatDiscretization",
    "make_discretization",
    "ProblemSpec",
    "get_problem",
    "METHODS",
    "solve",
    "fixed_point_solve",
    "StabilizationTable",
    "ThetaField",
    "compute_tables",
    "relative_l2_error",
    "overshoot_indicator",
    "estimate_orders",
    "SplineUpwindError",
    "ParameterError",
    "DomainError",
    "GeometryError",
    "DataError",
    "StabilizationError",
    "SolverError",
    "ConfigurationError",
]
