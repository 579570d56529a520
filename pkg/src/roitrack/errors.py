"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Array shapes do not line up for the requested operation."""


class ArgumentError(ValueError):
    """A scalar argument is outside its valid range."""


class NumericError(FloatingPointError):
    """A non-finite value or singular system was encountered."""


class DegenerateBoxError(ValueError):
    """A box has (near) zero width or height."""


class OutOfBoundsError(ValueError):
    """A box does not intersect the feature map."""


class SamplingExhaustedError(RuntimeError):
    """Rejection sampling hit its draw cap before collecting enough boxes."""


class StateError(RuntimeError):
    """An object was used before it held the data it needs."""


class ConfigError(ValueError):
    """A configuration is malformed or refers to something missing."""


class GenerationError(ValueError):
    """A synthetic sequence specification cannot be realised."""
