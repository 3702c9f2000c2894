"""Partial BNN exceptions."""

from __future__ import annotations


class PartialBnnError(Exception):
    """Base class for partialbnn errors."""


class ShapeMismatch(PartialBnnError):
    """Exception raised when a tensor dimension disagrees with its spec."""

    def __init__(self, dimension: str, expected: object, actual: object) -> None:
        """Initialize shape mismatch."""
        super().__init__(f"{dimension}: expected {expected}, got {actual}")
        self.dimension = dimension
        self.expected = expected
        self.actual = actual


class BatchNormDegenerate(PartialBnnError):
    """Exception raised when batch statistics cannot be computed."""


class EvalModeCache(PartialBnnError):
    """Exception raised when backward is called on an eval-mode cache."""


class LabelOutOfRange(PartialBnnError):
    """Exception raised when a class label is outside [0, C)."""


class StaleSample(PartialBnnError):
    """Exception raised when the cached noise no longer produces the weights."""


class NonFiniteLoss(PartialBnnError):
    """Exception raised when a training loss becomes NaN or infinite."""

    def __init__(self, step: int, layer: str, max_abs_grad: float) -> None:
        """Initialize non finite loss."""
        super().__init__(
            f"non-finite loss at step {step}, layer {layer}, "
            f"max|grad| = {max_abs_grad}",
        )
        self.step = step
        self.layer = layer
        self.max_abs_grad = max_abs_grad


class InvalidPlacement(PartialBnnError):
    """Exception raised when a placement names an unknown convolution group."""


class InvalidConfig(PartialBnnError):
    """Exception raised when a configuration field is invalid."""

    def __init__(self, field: str, message: str) -> None:
        """Initialize invalid config."""
        super().__init__(f"{field}: {message}")
        self.field = field


class DataRowInvalid(PartialBnnError):
    """Exception raised when a dataset row cannot be parsed."""

    def __init__(self, row: int, message: str) -> None:
        """Initialize data row invalid."""
        super().__init__(f"row {row}: {message}")
        self.row = row


class EmptySplit(PartialBnnError):
    """Exception raised when a split holds no images."""


class CheckpointWrongFormat(PartialBnnError):
    """Exception raised when a checkpoint has a bad magic or layout."""


class CheckpointVersionMismatch(PartialBnnError):
    """Exception raised when a checkpoint format version is unsupported."""


class CheckpointTruncated(PartialBnnError):
    """Exception raised when a checkpoint ends early."""


class CheckpointShapeMismatch(PartialBnnError):
    """Exception raised when checkpoint tensors disagree with the architecture."""


class NoVariationalLayers(PartialBnnError):
    """Exception raised when a model has no variational layer."""


class ReportWriteFailed(PartialBnnError):
    """Exception raised when a report cannot be written."""
