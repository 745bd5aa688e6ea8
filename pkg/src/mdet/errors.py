"""Exception hierarchy shared across the package.

Every error raised on a contract violation derives from MdetError so
callers (and the command line front end) can map failures to a small
set of outcomes: configuration mistakes, bad input data, and numeric
breakdown during a run.
"""


class MdetError(Exception):
    """Base class for all package errors."""


class ConfigError(MdetError):
    """Invalid configuration value or unusable argument combination."""


class DimensionError(ConfigError):
    """Operands have incompatible shapes; message names both shapes."""


class UnsupportedModeError(ConfigError):
    """Operation invoked in a mode it does not implement."""


class CapacityError(ConfigError):
    """A size limit was exceeded (e.g. more targets than query slots)."""


class DataError(MdetError):
    """Input data is malformed or inconsistent."""


class FormatError(DataError):
    """A file could not be parsed; message carries path and position."""


class AnnotationError(DataError):
    """Annotation content is invalid (degenerate box, bad class id)."""


class IntegrityError(DataError):
    """Internal consistency check failed (mismatched index sets, sizes)."""


class GenerationError(DataError):
    """Scene synthesis could not satisfy its constraints."""


class EmptyBatchError(DataError):
    """A loss was requested over zero elements."""


class NumericError(MdetError):
    """Numeric breakdown: NaN/Inf appeared or a check diverged."""


class DeterminismError(NumericError):
    """Two evaluations of a supposedly pure function disagreed."""


#: Process exit codes used by the command line front end.
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the documented process exit code."""
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, DataError):
        return EXIT_DATA
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    return 1
