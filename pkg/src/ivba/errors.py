"""Exception types shared across modules."""


class ConfigurationError(ValueError):
    """Invalid parameters or inconsistent inputs."""


class DataError(ValueError):
    """Input files are missing, malformed or unusable."""


class TrainingDataError(DataError):
    """Training set carries no usable (masked) cells."""


class DegenerateSessionError(RuntimeError):
    """The simulated camera sees no landmarks at some frame."""

    def __init__(self, frame_index: int, message: str | None = None):
        super().__init__(message or f"no landmark in front of the camera at frame {frame_index}")
        self.frame_index = frame_index


class InsufficientSpanError(DataError):
    """Trajectory is shorter than the requested evaluation distance."""
