"""Exception types shared across the library."""

from __future__ import annotations


class BreakdownError(RuntimeError):
    """A solver recurrence hit a divisor below the breakdown tolerance.

    ``kind`` names the offending quantity (for example ``"pAp"`` or
    ``"Apr0star"``) so drivers and tests can tell breakdowns apart.
    """

    def __init__(self, kind: str, message: str = ""):
        self.kind = kind
        super().__init__(message or f"breakdown: {kind}")


class LuckyBreakdown(Exception):
    """Raised when a Krylov basis candidate has (numerically) zero norm.

    This is a control-flow signal, not a failure: the invariant subspace
    has been exhausted and the solve can finish on the basis built so far.
    """

    def __init__(self, norm: float):
        self.norm = norm
        super().__init__(f"candidate basis vector has norm {norm!r}")


class TraceUsageError(RuntimeError):
    """Raised when launches or transfers are recorded outside an open phase."""


class MatrixMarketError(ValueError):
    """Malformed Matrix Market input; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
