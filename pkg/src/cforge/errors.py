"""Exception types shared across the package."""

from __future__ import annotations


class CforgeError(Exception):
    """Base class for all package errors."""


class GridMismatch(CforgeError):
    """Fields from different grids were combined."""


class NonPositiveDefinite(CforgeError):
    """Metric failed a positive-definiteness check at some node."""

    def __init__(self, node_index: int, minor: int):
        self.node_index = node_index
        self.minor = minor
        super().__init__(
            f"metric not positive definite: leading minor {minor} fails "
            f"at flat node index {node_index}"
        )


class NonPositive(CforgeError):
    """A field that must be strictly positive has a nonpositive node."""


class EigenSolveFailure(CforgeError):
    """Eigenvalue iteration failed to stabilize."""


class KrylovStagnation(CforgeError):
    """Conjugate gradient iteration stalled before reaching tolerance."""


class KernelContamination(CforgeError):
    """Vector solve drifted into the supplied operator kernel."""


class NoConvergence(CforgeError):
    """Nonlinear iteration hit its budget without meeting tolerance."""

    def __init__(self, message: str, best_residual: float | None = None):
        self.best_residual = best_residual
        super().__init__(message)


class CaseUnsolvable(CforgeError):
    """Sign and triviality pattern admits no positive solution."""


class BracketUnavailable(CforgeError):
    """Constant sub/supersolution bracket does not apply to this problem."""


class KappaUnbounded(CforgeError):
    """Pointwise lower bound degenerates: negative curvature meets a zero
    of the mean curvature."""


class TauNotPositive(CforgeError):
    """Diagnostic requires pointwise positive mean curvature."""


class InsufficientBlowUp(CforgeError):
    """Trace tail does not grow enough to justify a rescaled limit."""


class NotASolution(CforgeError):
    """Monitor input fails residual certification."""


class BlowUp(CforgeError):
    """Iteration exceeded the growth ceiling."""

    def __init__(self, message: str, trace=None):
        self.trace = trace
        super().__init__(message)


class ContinuationNotFound(CforgeError):
    """No parameter value in the sweep produced a converged fixed point."""


class PreconditionFailed(CforgeError):
    """Input data violates a hypothesis the routine relies on."""


class ParseError(CforgeError):
    """Config file syntax error."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(CforgeError):
    """Config or data failed semantic validation."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)
