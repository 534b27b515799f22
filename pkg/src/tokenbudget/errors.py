"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class ConfigError(ValueError):
    """A configuration value is out of its legal range."""


class BudgetError(ValueError):
    """The token budget cannot be satisfied for the given input."""


class FormatError(ValueError):
    """A serialized tensor or checkpoint failed validation."""


class TrainingError(RuntimeError):
    """Training diverged; carries the step index at which it happened."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"training diverged at step {step}")
