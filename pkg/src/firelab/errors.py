"""Exception types raised across firelab."""


class FireLabError(Exception):
    """Base class for all library errors."""


class InvalidParameter(FireLabError, ValueError):
    pass


class EmptyInput(FireLabError, ValueError):
    pass


class DomainError(FireLabError, ValueError):
    pass


class DegeneratePosition(FireLabError, ValueError):
    """Normalizer would be zero (query position 0 without a threshold)."""


class DegenerateRow(FireLabError, ValueError):
    pass


class NonDifferentiableConfiguration(FireLabError, ValueError):
    """Raised when gradients are requested through step/power/cos activations."""


class ConstructionOutOfRange(FireLabError, ValueError):
    pass


class InvalidInput(FireLabError, ValueError):
    pass


class TrainingDiverged(FireLabError, RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


class ConfigError(FireLabError, ValueError):
    pass


class OutputError(FireLabError, OSError):
    """An output file or directory could not be written."""

    def __init__(self, path, reason):
        super().__init__(f"cannot write {path}: {reason}")
        self.path = str(path)
