"""Exception types. Each carries the exit code the CLI maps it to."""

from __future__ import annotations


class QknitError(Exception):
    exit_code = 1


class ConfigError(QknitError, ValueError):
    """Invalid configuration, measurement spec or request."""

    exit_code = 3


class ImpossibleOutcome(QknitError, ValueError):
    """A projection or conditioning chain has (numerically) zero probability."""

    exit_code = 8


class FormatVersionError(QknitError):
    exit_code = 5


class TruncatedFileError(QknitError):
    exit_code = 6


class SchemaError(QknitError, ValueError):
    exit_code = 7


class InsufficientDataError(QknitError, ValueError):
    """Counts are missing a basis setting or have no conditioned events."""

    exit_code = 9
