"""Exception hierarchy shared by every module.

The CLI maps each class to a distinct process exit code.
"""


class RigidFlowError(Exception):
    exit_code = 1


class UsageError(RigidFlowError, ValueError):
    """Bad arguments: mismatched shapes, out-of-range parameters."""

    exit_code = 2


class DomainError(UsageError):
    """A geometric operation evaluated outside its domain (e.g. z <= 0)."""


class FormatError(RigidFlowError):
    """Malformed or unreadable file."""

    exit_code = 3


class DataError(RigidFlowError):
    """Well-formed input whose content is unusable (non-finite, wrong size)."""

    exit_code = 3


class InsufficientDataError(RigidFlowError):
    exit_code = 4


class EstimationError(RigidFlowError):
    exit_code = 5


class DegenerateGeometryError(EstimationError):
    """Point configuration does not constrain all six pose parameters."""
