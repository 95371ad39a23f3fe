"""Exception hierarchy.

Each class maps to a distinct CLI exit code (see :mod:`covdeform.cli`).
"""


class CovDeformError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class InputError(CovDeformError, ValueError):
    """Invalid argument: wrong shape, non-finite value, unsupported option."""

    exit_code = 2


class ConfigError(CovDeformError):
    exit_code = 2


class IngestionError(CovDeformError):
    """A dataset file is missing, malformed or inconsistent with the manifest."""

    exit_code = 3


class DivergenceError(CovDeformError):
    """A flow trajectory left the safety box, or the optimizer produced a non-finite loss."""

    exit_code = 4

    def __init__(self, message, node=None, iteration=None):
        super().__init__(message)
        self.node = node
        self.iteration = iteration


class ConditioningError(CovDeformError):
    """Cholesky factorization failed even at the maximum allowed jitter."""

    exit_code = 5


class FitError(CovDeformError):
    """Baseline fitting was asked to work with degenerate data."""

    exit_code = 6
