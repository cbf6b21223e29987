"""Exception types shared across the toolkit."""


class AvltError(Exception):
    """Base class for toolkit errors."""


class InvalidArgumentError(AvltError, ValueError):
    pass


class NumericalError(AvltError, ArithmeticError):
    pass


class ConfigurationError(AvltError, ValueError):
    pass


class TrainingError(AvltError):
    """Raised when a victim misses its validation target within budget."""

    def __init__(self, message, accuracy):
        super().__init__(f"{message} (final validation accuracy {accuracy:.4f})")
        self.accuracy = accuracy


class ConstructionError(AvltError):
    """Raised when a target set cannot be assembled."""

    def __init__(self, message, found):
        super().__init__(f"{message} (found {found})")
        self.found = found
