"""Exception hierarchy shared by the library and the CLI.

Each class carries the process exit code the CLI maps it to, so a failure
deep in the library surfaces as a stable, scriptable status: 2 for bad
configuration or arguments, 3 for missing or malformed data, 4 for numeric
breakdown (non-finite values), 5 for file transport problems (unreadable or
unwritable artifacts).
"""

from __future__ import annotations


class ClipchainError(Exception):
    exit_code = 1


class ConfigError(ClipchainError):
    """Invalid configuration, flags, or argument combinations."""

    exit_code = 2


class DataError(ClipchainError):
    """Dataset or checkpoint content is missing or malformed."""

    exit_code = 3


class NumericError(ClipchainError):
    """A computation produced non-finite values."""

    exit_code = 4


class TransportError(ClipchainError):
    """Reading or writing an artifact failed at the I/O layer."""

    exit_code = 5
