"""Exception types shared across the package."""


class L3DError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(L3DError, ValueError):
    """Input extents do not agree with what an operation requires."""


class ConfigError(L3DError, ValueError):
    """A configuration value is missing, malformed or violates an invariant."""


class NumericalError(L3DError, FloatingPointError):
    """A loss or gradient became non-finite."""


class FormatError(L3DError, ValueError):
    """A serialized container is corrupt or has an unsupported version."""
