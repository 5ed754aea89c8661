"""Error taxonomy shared by the library and the command-line tools.

Each class carries the process exit code the CLI maps it to, so library code
can raise precisely and the CLI stays a thin translation layer.
"""


class CrossviewError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(CrossviewError):
    """Invalid, unknown, or inconsistent configuration input."""

    exit_code = 2


class DataError(CrossviewError):
    """Malformed, out-of-range, or mismatched data (files or arrays)."""

    exit_code = 3


class NumericError(CrossviewError):
    """Numeric failure: non-finite values, failed gradient check, divergence."""

    exit_code = 4


class ContractError(CrossviewError):
    """An internal API contract was violated (caller bug, not user input)."""

    exit_code = 5
