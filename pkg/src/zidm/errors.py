"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, IngestionError and
ShapeError -> 3, NumericalError -> 4.
"""


class ZidmError(Exception):
    """Base class for all package errors."""


class ParameterError(ZidmError, ValueError):
    """A distribution or operation parameter is outside its domain."""


class ShapeError(ZidmError, ValueError):
    """Array dimensions are inconsistent."""


class IngestionError(ZidmError, ValueError):
    """Input data files are malformed (bad counts, ragged rows, missing values)."""


class ConfigError(ZidmError, ValueError):
    """Run configuration is invalid."""


class NumericalError(ZidmError, ArithmeticError):
    """A numerical operation failed (non-finite values, non-PD matrix)."""


class InvariantError(ZidmError, RuntimeError):
    """A model-state invariant was violated after a sampler update."""


class EmptyTraceError(ZidmError, ValueError):
    """A posterior summary was requested from an empty trace."""


class GenerationError(ZidmError, RuntimeError):
    """A simulation spec could not be realized (e.g. endless re-draw loop)."""
