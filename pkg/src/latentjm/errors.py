"""Exception types raised across the package."""


class LatentJMError(Exception):
    """Base class for all package errors."""


# spline
class InvalidKnots(LatentJMError, ValueError):
    pass


class InvalidDegree(LatentJMError, ValueError):
    pass


class OutOfDomain(LatentJMError, ValueError):
    pass


# quadrature
class InvalidOrder(LatentJMError, ValueError):
    pass


class InvalidVariance(LatentJMError, ValueError):
    pass


class DegenerateLikelihood(LatentJMError, FloatingPointError):
    pass


# data model
class ParseError(LatentJMError, ValueError):
    def __init__(self, message, path=None, row=None):
        self.path = path
        self.row = row
        where = ""
        if path is not None:
            where += f"{path}"
        if row is not None:
            where += f" row {row}"
        super().__init__(f"{where}: {message}" if where else message)


class OrphanLongitudinal(ParseError):
    pass


class FollowupAfterEvent(ParseError):
    pass


class DuplicateCell(ParseError):
    pass


# estimation
class NoData(LatentJMError, ValueError):
    def __init__(self, biomarker):
        self.biomarker = biomarker
        super().__init__(f"no observed cells for biomarker {biomarker + 1}")


class DegenerateLatentProcess(LatentJMError, ArithmeticError):
    pass


class SingularInformation(LatentJMError, ArithmeticError):
    pass


class RankDeficient(LatentJMError, ArithmeticError):
    pass


class ZeroLikelihood(LatentJMError, ArithmeticError):
    pass


class UnderdeterminedInit(LatentJMError, ValueError):
    pass


class FitError(LatentJMError, RuntimeError):
    """A sub-update failed; ``iteration`` records where."""

    def __init__(self, message, iteration=None, cause=None):
        self.iteration = iteration
        self.cause = cause
        prefix = f"iteration {iteration}: " if iteration is not None else ""
        super().__init__(prefix + message)


# prediction
class EmptyRiskSet(LatentJMError, ValueError):
    pass


# bootstrap
class InsufficientReplicates(LatentJMError, ValueError):
    pass
