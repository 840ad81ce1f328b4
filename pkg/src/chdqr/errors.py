"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class ChdqrError(Exception):
    exit_code = 1


class ConfigError(ChdqrError, ValueError):
    exit_code = 2


class DataError(ChdqrError, ValueError):
    exit_code = 3


class NumericalError(ChdqrError, ArithmeticError):
    exit_code = 4


class DegenerateTessellationError(NumericalError):
    """Two prototypes coincide (or a cell collapsed to zero volume)."""
