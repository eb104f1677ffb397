class ConfigurationError(ValueError):
    """Parameters that do not describe a valid object."""


class CapacityError(RuntimeError):
    """Request needs more precision, field size or memory than supported."""


class CalibrationError(RuntimeError):
    """A calibrated slot could not reach its target error."""
