"""Exception and warning types shared across the package."""

from __future__ import annotations


class FinFiltError(Exception):
    """Base class for all numerical failures raised by finfilt."""


class QuadratureError(FinFiltError):
    pass


class IllConditionedError(FinFiltError):
    """The moment (Hankel) matrix is too ill-conditioned to invert reliably."""

    def __init__(self, message: str, condition: float):
        super().__init__(message)
        self.condition = condition


class BoundaryError(FinFiltError):
    """Recovered canonical parameters leave the manifold (leading coefficient >= 0)."""

    def __init__(self, message: str, theta=None):
        super().__init__(message)
        self.theta = theta


class ConvergenceError(FinFiltError):
    def __init__(self, message: str, best=None, iterations: int = 0):
        super().__init__(message)
        self.best = best
        self.iterations = iterations


class DomainError(FinFiltError):
    """A density has non-negligible mass outside the window it was declared on."""


class FilterStepError(FinFiltError):
    """A filter recursion failed; carries the step index and the partial output."""

    def __init__(self, message: str, step: int, partial=None):
        super().__init__(f"step {step}: {message}")
        self.step = step
        self.partial = partial if partial is not None else []


class NearBoundaryWarning(UserWarning):
    """Leading canonical coefficient is within 1e-8 of zero."""


class FellerWarning(UserWarning):
    """CIR parameters violate 2*k*theta >= sigma**2."""


class InputError(ValueError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, message: str, path=None, line: int | None = None):
        where = f"{path}:{line}: " if path is not None and line is not None else (f"{path}: " if path is not None else "")
        super().__init__(where + message)
        self.path = None if path is None else str(path)
        self.line = line
