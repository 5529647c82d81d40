"""Exception hierarchy shared by every subpackage."""


class OsteoError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(OsteoError, ValueError):
    """Tensor shapes do not agree with what an operation requires."""


class InputError(OsteoError, ValueError):
    """An argument is outside the domain an operation accepts."""


class StateError(OsteoError, RuntimeError):
    """An object is not in the state an operation requires."""


class NumericError(OsteoError, ArithmeticError):
    """A computation produced NaN or Inf."""


class ParseError(OsteoError, ValueError):
    """A text file (annotations, config, PGM header) is malformed."""


class CheckpointError(OsteoError, ValueError):
    """A checkpoint file is corrupt or disagrees with the model config."""


class FoldAbort(OsteoError, RuntimeError):
    """A cross-validation fold stopped because training diverged."""

    def __init__(self, fold: int, message: str):
        super().__init__(f"fold {fold}: {message}")
        self.fold = fold
