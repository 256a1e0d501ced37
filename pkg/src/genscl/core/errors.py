"""
Exception hierarchy for the genscl toolkit.

Every library error carries the process exit code the CLI reports for it.
"""

import logging
from typing import Any, NoReturn, Optional

logger = logging.getLogger(__name__)


class ExitCode:
    SUCCESS = 0
    PROPERTY_FAILURE = 1
    USAGE = 2
    IO = 3
    NUMERIC_ABORT = 4


class GSCLError(Exception):
    """Base class for all errors raised by the toolkit."""

    exit_code: int = ExitCode.USAGE


class ConfigError(GSCLError):
    """Invalid or unresolvable configuration."""

    exit_code = ExitCode.USAGE


class DimensionMismatchError(GSCLError, ValueError):
    """Array shapes that must agree do not."""

    exit_code = ExitCode.USAGE


class LabelError(GSCLError, ValueError):
    """Labels unsuitable for the requested loss (e.g. soft labels given to SupCon)."""

    exit_code = ExitCode.USAGE


class MixingError(GSCLError, ValueError):
    """Mixing requested where no partner view can be drawn."""

    exit_code = ExitCode.USAGE


class DegenerateVectorError(GSCLError, ValueError):
    """Zero-norm vector where a direction is required."""

    exit_code = ExitCode.NUMERIC_ABORT


class MissingForwardCacheError(GSCLError, RuntimeError):
    """Backward pass requested without a cached forward pass."""

    exit_code = ExitCode.PROPERTY_FAILURE


class NumericAbortError(GSCLError, FloatingPointError):
    """Training diverged; carries what is needed to replay the offending batch."""

    exit_code = ExitCode.NUMERIC_ABORT

    def __init__(self, message: str, replay_seed: str, last_record: Optional[Any] = None):
        super().__init__(message)
        self.replay_seed = replay_seed
        self.last_record = last_record


class FormatError(GSCLError):
    """Malformed dataset or checkpoint file."""

    exit_code = ExitCode.IO


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


def raise_logged(error: GSCLError) -> NoReturn:
    """Log an error at ERROR level and raise it."""
    logger.error(str(error))
    raise error
