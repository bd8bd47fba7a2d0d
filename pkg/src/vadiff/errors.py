"""Exception hierarchy shared across the toolkit.

Exit-code mapping used by the CLI: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class VadiffError(Exception):
    pass


class InvalidInputError(VadiffError):
    """An operation was called with inputs violating its preconditions."""


class FormatError(VadiffError):
    """A binary container or manifest is malformed or truncated."""


class ConfigError(VadiffError):
    """Bad or inconsistent run configuration."""


class DataError(VadiffError):
    """Missing or mismatched data (files, dims, condition streams)."""


class NumericError(VadiffError):
    """Non-finite values encountered where finite math is required."""
