"""Exception hierarchy shared across the package."""


class DagschedError(Exception):
    """Base class for all package errors."""


class ValidationError(DagschedError):
    """A config, spec file, or domain object failed validation."""


class CycleError(ValidationError):
    """A task graph contains a cycle."""


class DanglingEdgeError(ValidationError):
    """A task graph edge points at a task id that does not exist."""


class PreconditionError(DagschedError):
    """An operation was called before its inputs were ready."""


class ConstraintViolationError(DagschedError):
    """A hard scheduling constraint was violated during a computation."""


class NumericError(DagschedError):
    """A non-finite value appeared in a numeric computation.

    ``layer`` identifies where the value first appeared.
    """

    def __init__(self, message: str, layer: str | None = None):
        super().__init__(message if layer is None else f"{message} (layer: {layer})")
        self.layer = layer


class SizeLimitError(DagschedError):
    """An exhaustive computation was refused because the instance is too large."""


class TransportError(DagschedError):
    """A trajectory envelope failed integrity checks in transit."""
