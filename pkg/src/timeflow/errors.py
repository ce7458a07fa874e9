"""Exception hierarchy shared across the package."""


class TimeFlowError(Exception):
    """Base class for all package errors."""


class DimensionError(TimeFlowError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(TimeFlowError, ValueError):
    """A documented precondition was violated."""


class DivergenceError(TimeFlowError, ArithmeticError):
    """A loss or gradient became non-finite during optimization."""

    def __init__(self, message, step=None, epoch=None, batch=None):
        super().__init__(message)
        self.step = step
        self.epoch = epoch
        self.batch = batch


class ParseError(TimeFlowError, ValueError):
    """Malformed input file."""


class ConfigError(TimeFlowError, ValueError):
    """Invalid run configuration."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class CheckpointError(TimeFlowError):
    """Checkpoint file is unreadable, truncated or inconsistent."""


class UnsupportedVersionError(CheckpointError):
    """Checkpoint was written with an unknown format version."""
