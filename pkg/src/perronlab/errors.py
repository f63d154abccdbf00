"""Exception hierarchy shared across the package."""


class PerronLabError(Exception):
    """Base class for all package errors."""


class ExprSyntaxError(PerronLabError):
    """Raised when expression source text cannot be parsed.

    Carries the character position of the offending token.
    """

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class ExprDomainError(PerronLabError):
    """Evaluation left the natural domain (division by zero, invalid power, ...)."""


class NonDifferentiableError(PerronLabError):
    """Symbolic differentiation hit a primitive with kinks (min/max/abs)."""


class ProblemValidationError(PerronLabError):
    """Problem datum failed validation; downstream modules refuse it."""


class GridError(PerronLabError):
    """Malformed grid or grid function."""


class SdeExplosionError(PerronLabError):
    """A simulated path left the escape radius or became non-finite."""

    def __init__(self, path: int, step: int, t: float, detail: str = ""):
        msg = f"path {path} exploded at step {step} (t={t:g})"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.path = path
        self.step = step
        self.t = t


class SolveError(PerronLabError):
    """Linear solve or scheme assembly failure in the PDE module."""


class UnsupportedProblemError(PerronLabError):
    """Problem shape outside the supported class (e.g. non-diagonal diffusion on grids)."""
