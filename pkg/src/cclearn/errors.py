"""Exception types shared across the package."""


class CCLearnError(Exception):
    """Base class for package errors."""


class InvalidArgumentError(CCLearnError, ValueError):
    """An input violates a documented precondition."""


class DegenerateFitError(CCLearnError, RuntimeError):
    """A model could not be fitted from the data supplied.

    ``stage`` is set when the failure happened inside a backward-induction
    stage, so callers can report where the recursion broke down.
    """

    def __init__(self, message, stage=None):
        if stage is not None:
            message = f"stage {stage}: {message}"
        super().__init__(message)
        self.stage = stage


class DegenerateFitWarning(UserWarning):
    """Emitted when a fit fell back to a trivial model instead of raising."""
