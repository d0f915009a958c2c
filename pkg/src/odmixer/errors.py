"""Exception types shared across the package.

The CLI maps these onto process exit codes: configuration problems exit 1,
data problems exit 2, numeric failures exit 3.
"""


class OdmixerError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(OdmixerError):
    """Invalid configuration: unknown key, bad value, impossible split."""


class DataError(OdmixerError):
    """Invalid or inconsistent data."""


class ParseError(DataError):
    """Malformed input file; carries the offending line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DomainError(DataError):
    """Value outside its domain (negative flow, wrong matrix kind, ...)."""


class HistoryError(DataError):
    """Not enough history available for the requested estimation."""


class ShapeError(OdmixerError):
    """Tensor shape mismatch; the message names both shapes."""


class StateError(OdmixerError):
    """Operation invalid in the current state (e.g. tape already consumed)."""


class NumericError(OdmixerError):
    """Non-finite values where finite ones are required."""
