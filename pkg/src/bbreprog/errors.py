"""Exception hierarchy shared by every stage of the lab."""


class LabError(Exception):
    """Base class for all errors raised by bbreprog."""


class InvalidInputError(LabError, ValueError):
    pass


class InvalidDistributionError(LabError, ValueError):
    pass


class CapabilityError(LabError):
    """Raised when an operation needs access the service does not grant."""


class StateError(LabError, RuntimeError):
    pass


class ConfigError(LabError, ValueError):
    pass


class TrainingError(LabError, RuntimeError):
    def __init__(self, message, epoch=None):
        super().__init__(message if epoch is None else f"{message} (epoch {epoch})")
        self.epoch = epoch


class InfeasibleMappingError(LabError, ValueError):
    pass


class BudgetError(LabError, RuntimeError):
    """Raised when a zeroth-order run exceeds its API-call cap.

    The partial trace collected so far travels with the exception.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class StageError(LabError, RuntimeError):
    """Wraps an error raised inside one experiment stage."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


class GateError(LabError, AssertionError):
    """An accounting or acceptance postcondition did not hold."""
