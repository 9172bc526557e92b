"""
Errors: Exception hierarchy shared by all memaudit components.

Contract: project v1.0.0
"""


class MemauditError(Exception):
    """Base class for every error raised by memaudit."""


class ConfigError(MemauditError):
    """Invalid configuration, usage or missing input path."""


class ShapeError(MemauditError, ValueError):
    """Array shapes do not line up (batch vs model input, snapshot vs model)."""


class NonFiniteError(MemauditError, FloatingPointError):
    """NaN or Inf appeared in a forward pass, backward pass or loss."""


class TapeError(MemauditError, RuntimeError):
    """Backward requested without a recorded forward pass."""


class FormatError(MemauditError, ValueError):
    """A binary file (IDX, CIFAR-10 batch, MAUD container) failed to parse."""


class UnsupportedTransformError(MemauditError, ValueError):
    """No OOD transform exists between the requested shapes."""


class DataError(MemauditError, ValueError):
    """Dataset contents violate an operation's precondition."""


class TrainingError(MemauditError):
    """A training run aborted (non-finite loss, empty split)."""
