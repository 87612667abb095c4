"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Array or image dimensions violate an operation's precondition."""


class DataError(RuntimeError):
    """Input data is missing, incomplete or insufficient."""


class ConfigurationError(ValueError):
    """Incompatible or invalid configuration (dictionary, checkpoint, flags)."""


class UsageError(ValueError):
    """An operation was called with arguments outside its contract."""


class TrainingDiverged(FloatingPointError):
    """A loss became non-finite during training.

    ``checkpoint`` points at the last checkpoint written before divergence,
    or is ``None`` if nothing was saved yet.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
