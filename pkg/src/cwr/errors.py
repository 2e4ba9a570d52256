"""Exception hierarchy.

CLI exit codes key off the three families: ``ValidationError`` (2),
``ConvergenceError`` (3) and ``DegenerateDataError`` (4).
"""


class CwrError(Exception):
    """Base class for all package errors."""


class ValidationError(CwrError, ValueError):
    """Input does not satisfy a documented contract."""


class SchemaError(ValidationError):
    pass


class MissingDataError(ValidationError):
    pass


class UnknownClusterError(ValidationError, KeyError):
    pass


class DomainError(ValidationError):
    pass


class DegenerateDataError(CwrError):
    """The data cannot support the requested computation."""


class EmptyDatasetError(DegenerateDataError):
    pass


class SeparationError(DegenerateDataError):
    def __init__(self, message, cluster=None):
        super().__init__(message)
        self.cluster = cluster


class SingularDesignError(DegenerateDataError):
    pass


class SingularJacobianError(DegenerateDataError):
    pass


class ExtremePropensityError(DegenerateDataError):
    def __init__(self, message, subjects=()):
        super().__init__(message)
        self.subjects = list(subjects)


class DegenerateClusterError(DegenerateDataError):
    pass


class UndefinedRatioError(DegenerateDataError):
    pass


class ConvergenceError(CwrError):
    """An iterative solver stopped without meeting its tolerance."""

    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class UnstableBootstrapError(ConvergenceError):
    pass
