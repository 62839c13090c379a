"""Exception hierarchy.

Every error raised on purpose by the package derives from WaveDebandError and
carries a short machine-parsable ``code``. The command line prints errors as
``<code>: <message>`` so that scripts can grep for the prefix.
"""

from typing import ClassVar


class WaveDebandError(Exception):
    """Base class for all errors raised by wavedeband."""

    code: ClassVar[str] = "E_GENERIC"

    def one_line(self) -> str:
        """Render the error as a single ``<code>: <message>`` line."""
        message = " ".join(str(self).split())
        return f"{self.code}: {message}"


class DimensionError(WaveDebandError, ValueError):
    """Array shapes are inconsistent with the operation's contract."""

    code = "E_DIM"


class ArgumentError(WaveDebandError, ValueError):
    """An argument value is outside of its documented range."""

    code = "E_ARG"


class DataIOError(WaveDebandError, OSError):
    """A file could not be read or written."""

    code = "E_IO"


class UnsupportedFormatError(DataIOError):
    """A file is readable but stored in a format we refuse to interpret."""

    code = "E_FORMAT"


class CheckpointError(WaveDebandError):
    """A checkpoint is truncated, foreign, or of the wrong version."""

    code = "E_CHECKPOINT"


class TrainingFault(WaveDebandError, ArithmeticError):
    """Non-finite values appeared in the loss, the parameters, or an output."""

    code = "E_TRAIN"


class EvaluationError(WaveDebandError):
    """No report row could be computed."""

    code = "E_EVAL"


class ConfigError(ArgumentError):
    """Configuration could not be parsed or failed validation."""

    code = "E_CONFIG"


class RefusedError(WaveDebandError):
    """The request is well formed but deliberately not carried out."""

    code = "E_REFUSED"
