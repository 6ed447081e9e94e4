"""Exception hierarchy shared by all modules."""


class DanCountError(Exception):
    """Base class for every error raised by the package."""


class MalformedFile(DanCountError):
    pass


class OutOfBounds(DanCountError):
    pass


class DuplicatePoint(DanCountError):
    pass


class IoFailure(DanCountError):
    pass


class InfeasibleConfig(DanCountError):
    pass


class NonPositiveSigma(DanCountError):
    pass


class BadScale(DanCountError):
    pass


class ShapeMismatch(DanCountError):
    pass


class OddDimension(DanCountError):
    pass


class BadShape(DanCountError):
    pass


class PatchTooLarge(DanCountError):
    pass


class VersionMismatch(DanCountError):
    pass


class EmptyInput(DanCountError):
    pass


class ConfigError(DanCountError):
    """Invalid or unknown configuration entry."""
