"""Custom error types for the cov3d package."""

__all__ = [
    "Cov3DError",
    "Cov3DFileError",
    "ConfigError",
    "DataError",
    "ManifestError",
    "ScanLoadError",
    "SyntheticSpecError",
    "ModelError",
    "ShapeMismatchError",
    "NonFiniteError",
    "TrainingError",
    "EmptyDatasetError",
    "MissingClassError",
    "NonFiniteLossError",
    "CheckpointError",
    "EvaluationError",
]


class Cov3DError(Exception):
    """Base exception for all cov3d errors."""

    pass


class Cov3DFileError(Cov3DError):
    """For file system operation errors."""

    pass


class ConfigError(Cov3DError):
    """Raised for invalid or unknown configuration values."""

    def __init__(self, message: str, *, suggestion: str | None = None):
        super().__init__(message)
        self.suggestion = suggestion

    def __str__(self) -> str:
        base_str = super().__str__()
        if self.suggestion is not None:
            return f"{base_str} (Did you mean: {self.suggestion!r}?)"
        return base_str


class DataError(Cov3DError):
    """For dataset, manifest and scan loading errors."""

    pass


class ManifestError(DataError):
    """Raised when a manifest file is missing or malformed."""

    def __init__(self, message: str, *, row: int | None = None):
        super().__init__(message)
        self.row = row

    def __str__(self) -> str:
        base_str = super().__str__()
        if self.row is not None:
            return f"{base_str} (Row: {self.row})"
        return base_str


class ScanLoadError(DataError):
    """Raised when a scan directory or one of its slices cannot be read."""

    def __init__(self, message: str, *, index: int | None = None):
        super().__init__(message)
        self.index = index

    def __str__(self) -> str:
        base_str = super().__str__()
        if self.index is not None:
            return f"{base_str} (Slice Index: {self.index})"
        return base_str


class SyntheticSpecError(DataError):
    """Raised for a degenerate synthetic dataset specification."""

    pass


class ModelError(Cov3DError):
    """For model construction and forward-pass errors."""

    def __init__(self, message: str, *, stage: str | None = None):
        super().__init__(message)
        self.stage = stage

    def __str__(self) -> str:
        base_str = super().__str__()
        if self.stage is not None:
            return f"{base_str} (Stage: {self.stage})"
        return base_str


class ShapeMismatchError(ModelError):
    """Raised when a tensor does not have the shape a stage expects."""

    pass


class NonFiniteError(ModelError):
    """Raised when NaN or Inf values appear in a forward pass."""

    pass


class TrainingError(Cov3DError):
    """For training-loop errors."""

    pass


class EmptyDatasetError(TrainingError):
    """Raised when a training set has no samples."""

    def __init__(self, message: str = "empty dataset"):
        super().__init__(message)


class MissingClassError(TrainingError):
    """Raised when a training set does not cover every class of the head."""

    def __init__(self, message: str, *, missing: list[int] | None = None):
        super().__init__(message)
        self.missing = missing or []


class NonFiniteLossError(TrainingError):
    """Raised when the training loss becomes NaN or Inf."""

    def __init__(self, message: str, *, epoch: int, batch: int):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch

    def __str__(self) -> str:
        base_str = super().__str__()
        return f"{base_str} (Epoch: {self.epoch}, Batch: {self.batch})"


class CheckpointError(Cov3DError):
    """Raised for unreadable checkpoints or checkpoint/task mismatches."""

    pass


class EvaluationError(Cov3DError):
    """Raised for invalid predictions, labels or metric inputs."""

    pass
