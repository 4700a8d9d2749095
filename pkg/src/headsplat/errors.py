"""Exception hierarchy shared by all headsplat modules."""


class HeadSplatError(Exception):
    """Base class for all library errors."""


class ParameterError(HeadSplatError, ValueError):
    """An argument violates a documented precondition (shape, range, ...)."""


class InputError(HeadSplatError, ValueError):
    """External input (file, dataset) is malformed or inconsistent."""


class GeometryError(HeadSplatError, ValueError):
    """Degenerate geometry (zero-area triangle, invalid frame, ...)."""


class StateError(HeadSplatError, RuntimeError):
    """An operation was called on an object in the wrong state."""
