"""perronlab: cross-verification lab for linear parabolic PDEs and their diffusions.

The package simulates the underlying SDE, estimates expected terminal payoffs
by Monte Carlo, solves the terminal-value PDE on a grid, statistically tests
super/sub-martingale membership of candidate functions, and constructs upper
and lower Perron envelopes whose gap brackets the solution.
"""

__version__ = "0.1.0"

from .errors import (
    ExprDomainError,
    ExprSyntaxError,
    GridError,
    NonDifferentiableError,
    PerronLabError,
    ProblemValidationError,
    SdeExplosionError,
    SolveError,
    UnsupportedProblemError,
)

__all__ = [
    "__version__",
    "PerronLabError",
    "ExprSyntaxError",
    "ExprDomainError",
    "NonDifferentiableError",
    "ProblemValidationError",
    "GridError",
    "SdeExplosionError",
    "SolveError",
    "UnsupportedProblemError",
]
