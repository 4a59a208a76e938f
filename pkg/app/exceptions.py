from typing import Optional


class ExpoDebiasError(Exception):
    """Base class for errors raised by this package."""


class ConfigurationError(ExpoDebiasError):
    pass


class RatingsParseError(ExpoDebiasError, ValueError):
    def __init__(self, message: str, line_number: Optional[int] = None, path: Optional[str] = None):
        self.line_number = line_number
        self.path = path
        location = ""
        if path is not None:
            location = f"{path}:"
        if line_number is not None:
            location = f"{location}{line_number}: "
        elif location:
            location = f"{location} "
        super().__init__(f"{location}{message}")


class CheckpointError(ExpoDebiasError):
    pass


class TrainingDivergedError(ExpoDebiasError, RuntimeError):
    def __init__(self, method: str, epoch: int, detail: str = "loss became non-finite"):
        self.method = method
        self.epoch = epoch
        super().__init__(f"{method} diverged at epoch {epoch}: {detail}")


class GradientCheckError(ExpoDebiasError):
    def __init__(self, component: str, detail: str):
        self.component = component
        super().__init__(f"gradient check failed for {component}: {detail}")
