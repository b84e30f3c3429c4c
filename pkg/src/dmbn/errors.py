"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of the operation."""


class ModeError(RuntimeError):
    """An operation was invoked under the wrong time-injection mode."""


class MalformedFileError(RuntimeError):
    """A dataset or checkpoint file is truncated or structurally invalid."""


class UnsupportedVersionError(MalformedFileError):
    """File carries a recognized magic prefix but an unsupported version."""
