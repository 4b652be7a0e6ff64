"""Exception hierarchy shared across the package."""


class LockinError(Exception):
    """Base class for all package errors."""


class ShapeError(LockinError, ValueError):
    pass


class StateError(LockinError, RuntimeError):
    pass


class NumericError(LockinError, FloatingPointError):
    pass


class ConfigError(LockinError, ValueError):
    pass


class ValidationError(LockinError, ValueError):
    pass


class ResolutionError(LockinError, ValueError):
    """A prompt names an object or zone that the scene does not contain."""
