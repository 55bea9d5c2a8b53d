class VMonarchError(Exception):
    """Base class for library errors."""


class DimensionError(VMonarchError, ValueError):
    """Shapes are inconsistent or not factorizable."""


class DomainError(VMonarchError, ValueError):
    """Values lie outside the domain an operation accepts."""


class StateError(VMonarchError, RuntimeError):
    """An operation was called before its required predecessor."""


class FormatError(VMonarchError, ValueError):
    """A MATN tensor file could not be parsed."""
