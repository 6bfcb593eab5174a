"""Exception types shared across the lab."""


class ShapeError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


class StaleTapeError(RuntimeError):
    pass


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending key when known."""

    def __init__(self, message: str, path: str | None = None):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class TokenError(KeyError):
    pass


class ModeError(ValueError):
    """Operation not defined for this data kind (points vs images)."""


class TrainingDiverged(RuntimeError):
    pass


class ConstraintNotMet(RuntimeError):
    """The budget was never met; ``result`` holds the best-feasible (or last) iterate."""

    def __init__(self, message: str, result=None):
        super().__init__(message)
        self.result = result


class InsufficientData(ValueError):
    pass


class BaselineMissing(KeyError):
    pass


class FormatError(ValueError):
    pass


class UnsupportedVersion(FormatError):
    pass


class CorruptCheckpoint(FormatError):
    pass
