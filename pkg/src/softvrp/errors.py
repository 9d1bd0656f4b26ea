"""Exception hierarchy shared by all modules."""


class SoftVRPError(Exception):
    """Base class for package errors."""


class ConfigError(SoftVRPError, ValueError):
    """Invalid configuration or instance parameters."""


class InstanceParseError(SoftVRPError, ValueError):
    """A serialized instance could not be parsed."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class InstanceValidationError(SoftVRPError, ValueError):
    """An instance violates a structural rule of its variant."""


class UnsupportedVariantError(SoftVRPError, ValueError):
    """An evaluator was called on a variant lacking the needed data."""


class ActionError(SoftVRPError, ValueError):
    """Illegal swap positions for a route state."""


class NoActionError(SoftVRPError, ValueError):
    """The state has fewer than two swappable positions."""


class InfeasibleInstanceError(SoftVRPError, ValueError):
    """Some customer demand exceeds the vehicle capacity."""


class ContractError(SoftVRPError, RuntimeError):
    """Inputs computed under inconsistent settings were combined."""


class NumericError(SoftVRPError, FloatingPointError):
    """Non-finite values appeared in a gradient or loss."""

    def __init__(self, message: str, step: int | None = None, snapshot: dict | None = None):
        super().__init__(message)
        self.step = step
        self.snapshot = snapshot or {}


class CheckpointError(SoftVRPError, ValueError):
    """A parameter file does not match the expected architecture."""
