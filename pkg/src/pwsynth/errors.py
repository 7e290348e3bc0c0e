class ValidationError(ValueError):
    """Input violates a documented precondition or file format."""


class CapacityError(ValidationError):
    pass


class DecodeError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class NumericError(RuntimeError):
    """A loss or activation went non-finite."""
