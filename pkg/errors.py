"""Exception types shared by every module of the toolkit."""


class SpcrError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(SpcrError, ValueError):
    """Array shapes do not line up."""


class ParameterError(SpcrError, ValueError):
    """A scalar parameter is outside its allowed range."""


class FormatError(SpcrError, ValueError):
    """A data file does not follow the expected binary layout."""


class CountError(SpcrError, ValueError):
    """A data file declares or yields an unexpected number of records."""


class TruncationError(FormatError):
    """A data file ends before its declared payload."""


class DivergenceError(SpcrError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"Training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


class DensityFloorError(ParameterError):
    """The requested SPCA density would leave a component with no nonzero loading."""


class UnsupportedHeadError(SpcrError, TypeError):
    """The operation needs a linear head but received another kind."""


class SizeError(SpcrError, ValueError):
    """The problem is too large for an exhaustive computation."""


class ConfigError(SpcrError, ValueError):
    """The experiment configuration is malformed."""


class ModelFileError(SpcrError):
    """A persisted model file cannot be read."""


class MagicError(ModelFileError):
    """The model file does not start with the expected magic bytes."""


class VersionError(ModelFileError):
    """The model file was written by an unsupported format version."""


class ModelTruncationError(ModelFileError):
    """The model file ends in the middle of a record."""
