"""Nonlocal (fractional) minimal surfaces of subgraph type.

Numerical kernels, geometry, curvature operators, relaxation solvers and
verification suites for s-minimal graphs and cones.
"""

from .errors import (
    ConsistencyError,
    DivergenceError,
    DomainError,
    NlmsError,
    UnsupportedEvaluationError,
    ValidationError,
)
from .kernel import (
    F_infinity,
    FKernel,
    FractionalParams,
    KernelAccuracy,
    eval_F,
    eval_F_prime,
    get_kernel,
)

__version__ = "0.1.0"
