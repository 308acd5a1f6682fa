"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration/usage problems exit 2,
numeric failures exit 3 and file-format or I/O problems exit 4.
"""


class CosmaeError(Exception):
    exit_code = 1


class ConfigError(CosmaeError, ValueError):
    """Invalid configuration, shapes or hyperparameters."""

    exit_code = 2


class UsageError(CosmaeError, ValueError):
    """An operation was called with arguments that violate its contract."""

    exit_code = 2


class NumericError(CosmaeError, FloatingPointError):
    """A loss or gradient became non-finite."""

    exit_code = 3


class FormatError(CosmaeError, IOError):
    """A file on disk does not match the expected binary/text layout."""

    exit_code = 4
