"""Exception hierarchy.

Every error carries the CLI exit code of its class so that scripted sweeps
can tell configuration mistakes from numerical failures.
"""


class WeakFactorError(Exception):
    exit_code = 1


class ConfigError(WeakFactorError, ValueError):
    exit_code = 2


class PreconditionError(WeakFactorError, ValueError):
    exit_code = 3


class PaddingError(PreconditionError):
    """The master grid does not contain a required ball plus padding."""


class ResolutionError(PreconditionError):
    """A ball is covered by too few grid cells."""


class NonContractionError(WeakFactorError, RuntimeError):
    exit_code = 4


class DegenerateGeometryError(WeakFactorError, ArithmeticError):
    exit_code = 5


class SingularityError(DegenerateGeometryError):
    """Kernel evaluated on the diagonal."""


class ResolutionWarning(UserWarning):
    pass


class CoverageWarning(UserWarning):
    """Every quadrature tuple at some evaluation point was excluded."""


class CancellationWarning(UserWarning):
    """An H1 estimate was requested for a function without mean zero."""
