"""Exception hierarchy shared across the package."""


class AdmpError(Exception):
    pass


class DimensionError(AdmpError, ValueError):
    pass


class NumericError(AdmpError, ArithmeticError):
    pass


class StateError(AdmpError, RuntimeError):
    pass


class CheckpointError(AdmpError):
    pass


class ConfigError(AdmpError, ValueError):
    pass


class InfeasibleError(AdmpError, ValueError):
    pass


class StructureError(AdmpError, ValueError):
    pass


class LabelError(AdmpError, ValueError):
    pass


class TrainingError(NumericError):
    """Loss became non-finite; carries the iteration index."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration
