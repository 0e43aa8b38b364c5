"""Exception hierarchy shared across the package."""


class StackLabError(Exception):
    """Base class for all package errors."""


class ShapeError(StackLabError, ValueError):
    pass


class InvalidArgumentError(StackLabError, ValueError):
    pass


class InvalidBatchError(InvalidArgumentError):
    pass


class StateError(StackLabError, RuntimeError):
    pass


class OptimizerError(StackLabError, FloatingPointError):
    pass


class ConfigError(StackLabError, ValueError):
    pass


class EncodingError(StackLabError, ValueError):
    pass


class RenderError(StackLabError, ValueError):
    pass


class CorruptDatasetError(StackLabError, IOError):
    pass


class IncompatibleCheckpointError(StackLabError, ValueError):
    pass


class NumericalError(StackLabError, FloatingPointError):
    """Raised when training produces a non-finite loss.

    ``checkpoint_path`` points at the diagnostic checkpoint written before
    aborting, when one could be written.
    """

    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
