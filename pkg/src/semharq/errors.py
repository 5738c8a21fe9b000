"""
Exception classes raised by semharq.

Every class derives from the built-in exception a caller would naturally
catch (``ValueError`` for bad inputs, ``RuntimeError`` for failures while
running), so ``except ValueError`` keeps working for code that does not care
about the finer distinction. The command line maps the classes to exit codes.
"""


class ConfigurationError(ValueError):
    """Invalid configuration value, unknown key or dimension mismatch."""


class UsageError(ValueError):
    """An API was called outside of its contract."""


class DimensionError(ValueError):
    """Array, image or codeword dimensions do not agree."""


class IngestionError(ValueError):
    """A raw image file is truncated or malformed."""

    def __init__(self, msg, offset=None):
        super().__init__(msg)
        self.offset = offset


class DegenerateCodewordError(ValueError):
    """Power normalization of a codeword without any signal power."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of a function."""


class ContractError(ValueError):
    """Arguments violate a documented pre-condition."""


class FrameError(ValueError):
    """A transmission frame could not be parsed."""


class ProtocolError(RuntimeError):
    """The transmission state machine was driven into an invalid state."""


class CheckpointError(RuntimeError):
    """A checkpoint file is unreadable or does not match the configuration."""


class TrainingError(RuntimeError):
    """Training produced non-finite values."""

    def __init__(self, msg, dump_path=None):
        super().__init__(msg)
        self.dump_path = dump_path


class TrainingDivergence(TrainingError):
    """A training stage produced a non-finite loss."""

    def __init__(self, msg, stage=None, step=None):
        super().__init__(msg)
        self.stage = stage
        self.step = step
