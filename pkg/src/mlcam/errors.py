"""Exception hierarchy shared across the package."""


class MLCAMError(Exception):
    """Base class for every error raised by mlcam."""


class DimensionError(MLCAMError, ValueError):
    """A tensor extent does not match what an operation requires."""

    def __init__(self, message: str, axis: str | None = None):
        self.axis = axis
        if axis is not None:
            message = f"{message} (axis: {axis})"
        super().__init__(message)


class NumericInputError(MLCAMError, ValueError):
    """An input contains NaN or infinite values."""


class ContractError(MLCAMError, RuntimeError):
    """An API was called outside its contract (e.g. backward on a non-scalar)."""


class ConfigError(MLCAMError, ValueError):
    """Invalid configuration value."""


class DataError(MLCAMError, ValueError):
    """Invalid or missing data. `problems` lists every offending item."""

    def __init__(self, message: str, problems: list[str] | None = None):
        self.problems = list(problems or [])
        if self.problems:
            message = message + ": " + "; ".join(self.problems)
        super().__init__(message)


class DivergenceError(MLCAMError, FloatingPointError):
    """Training produced a non-finite loss or gradient.

    `state` carries the training state at abort time, including the last good
    checkpoint, when available.
    """

    def __init__(self, message: str, state=None):
        self.state = state
        super().__init__(message)
