class ValidationError(ValueError):
    """Bad input shape, value or precondition."""


class ConfigError(ValidationError):
    pass


class CapacityError(ValidationError):
    """A dataset cannot supply the requested episode."""


class NumericError(ArithmeticError):
    """Non-finite loss or parameter during training."""

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step
