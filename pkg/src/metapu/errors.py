"""Exception types raised across metapu.

Each subclasses the builtin the calling code would naturally catch
(``ValueError`` for bad inputs, ``ArithmeticError`` for numeric failure),
so ``pytest.raises(ValueError)`` keeps working for callers that do not
care about the finer type.
"""
from typing import Optional


class MetaPUError(Exception):
    """Base class for all metapu errors."""


class ShapeError(MetaPUError, ValueError):
    """Tensor shapes do not conform for the requested operation."""


class ConfigError(MetaPUError, ValueError):
    """An argument or configuration value is outside its valid range."""


class DataFormatError(MetaPUError, ValueError):
    """A point, mesh or manifest file could not be parsed."""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(f"{where}{message}")


class CheckpointError(DataFormatError):
    """A checkpoint file is corrupt, truncated or of an unknown version."""


class NumericError(MetaPUError, ArithmeticError):
    """A computation produced non-finite values."""


class NonFiniteLossError(NumericError):
    """Training loss became NaN or infinite; the batch was dumped to disk."""

    def __init__(self, message: str, dump_path: Optional[str] = None):
        self.dump_path = dump_path
        if dump_path:
            message = f"{message} (batch dumped to {dump_path})"
        super().__init__(message)
