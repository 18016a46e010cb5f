"""Exception hierarchy shared by all modules."""


class EmiError(Exception):
    """Base class for every error raised by emiquant."""


class DomainError(EmiError, ValueError):
    """An argument lies outside the domain of an operation."""


class InsufficientData(EmiError):
    """Fewer observations than free parameters."""


class RankDeficient(EmiError):
    """The design matrix [1, X] does not have full column rank."""


class InsufficientExceedances(EmiError):
    """Too few strictly positive exceedances to fit a GPD."""

    def __init__(self, n_positive, required):
        super().__init__(f"{n_positive} positive exceedances, need at least {required}")
        self.n_positive = n_positive
        self.required = required


class ConvergenceFailure(EmiError):
    """An optimizer stopped without converging; ``best`` holds its best iterate."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class DegenerateFeature(EmiError):
    """A covariate column is constant, so no knot vector can span it."""


class SingularSystem(EmiError):
    """The spline coefficient system carries no information."""


class OfflineFitFailure(EmiError):
    """Too many per-point tail fits failed during the offline stage."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
