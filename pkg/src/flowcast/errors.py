"""Exception hierarchy and process exit codes.

Every CLI-visible failure maps to a distinct nonzero exit code so scripted
callers can branch on the kind of failure without parsing messages.
"""

EXIT_OK = 0
EXIT_USAGE = 2  # argparse default for bad flags
EXIT_MISSING_FILE = 3
EXIT_DATA = 4
EXIT_CONFIG = 5
EXIT_NUMERIC = 6


class FlowcastError(Exception):
    """Base class for all package errors surfaced to the CLI."""

    kind = "internal"
    exit_code = 1


class ConfigError(FlowcastError):
    """Invalid configuration value or violated configuration contract."""

    kind = "config"
    exit_code = EXIT_CONFIG


class DimensionError(ConfigError):
    """Tensor/array shape mismatch between cooperating components."""

    kind = "dimension"


class DataError(FlowcastError):
    """Malformed or empty dataset/prediction records."""

    kind = "data"
    exit_code = EXIT_DATA


class NumericsError(FlowcastError):
    """Nonfinite values where finite ones are required; never silently clipped."""

    kind = "numeric"
    exit_code = EXIT_NUMERIC
