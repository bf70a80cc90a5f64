"""Numerical laboratory for singular hyperbolic flows.

Pipeline: flow integration -> hyperbolicity diagnostics -> Poincare return
maps -> one-dimensional quotient map -> Gibbs-Markov inducing scheme ->
statistical limit laws.
"""

from .flows import (
    FlowSystem,
    classical_lorenz,
    classify_equilibria,
    eval_jacobian,
    eval_rhs,
    extended_lorenz,
    linear_saddle,
    polynomial_field,
)
from .integrate import OrbitSegment, flow_map, integrate, integrate_windows

__version__ = "0.1.0"

__all__ = [
    "FlowSystem",
    "classical_lorenz",
    "extended_lorenz",
    "linear_saddle",
    "polynomial_field",
    "eval_rhs",
    "eval_jacobian",
    "classify_equilibria",
    "integrate",
    "integrate_windows",
    "flow_map",
    "OrbitSegment",
    "__version__",
]
