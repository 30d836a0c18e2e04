"""Exception hierarchy shared across the package.

Every error raised on a user-facing path derives from NlmsError so the
CLI can map failures onto stable exit codes.
"""

from __future__ import annotations


class NlmsError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ValidationError(NlmsError):
    """Malformed arguments or configuration (bad s, bad grid shape, ...)."""

    exit_code = 2


class DomainError(NlmsError):
    """Structurally valid input outside the supported domain.

    Examples: evaluation point outside the admissible region, overlapping
    voxel sets, a point too close to the graph boundary to quadrature
    around.
    """

    exit_code = 3


class UnsupportedEvaluationError(DomainError):
    """Evaluation requested where the chosen far-field policy is undefined."""

    exit_code = 3


class DivergenceError(NlmsError):
    """An iterative scheme detected a growing residual and stopped.

    Carries the partial solve report (residual history up to the stop)
    so callers can still write diagnostics.
    """

    exit_code = 4

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class ConsistencyError(NlmsError):
    """A verification routine found a genuine internal inconsistency."""

    exit_code = 5
