"""Exception hierarchy shared by all modules."""


class PnPError(Exception):
    """Base class for every error raised by :mod:`pnpconvex`."""


class ValidationError(PnPError, ValueError):
    """An argument violates a documented precondition."""


class BudgetError(ValidationError):
    """A dense oracle was asked to materialize more entries than allowed."""

    def __init__(self, msg, required):
        super().__init__(msg)
        self.required = required


class ConvergenceError(PnPError):
    """An iterative method stopped without meeting its tolerance."""


class PowerMethodError(ConvergenceError):
    """Power iteration failed; ``best`` holds the lowest-residual iterate."""

    def __init__(self, msg, best=None):
        super().__init__(msg)
        self.best = best


class CGError(ConvergenceError):
    """Conjugate gradients stagnated or ran out of iterations.

    ``x`` is the iterate with the smallest residual and ``residuals`` the
    full residual-norm history.
    """

    def __init__(self, msg, x, residuals):
        super().__init__(msg)
        self.x = x
        self.residuals = residuals


class RangeError(PnPError):
    """A vector lies measurably outside the range of an operator."""

    def __init__(self, msg, residual):
        super().__init__(msg)
        self.residual = residual


class SpectrumError(PnPError):
    """A computed spectrum contradicts an assumed property (e.g. PSD)."""


class SinkhornError(ConvergenceError):
    def __init__(self, msg, deviation):
        super().__init__(msg)
        self.deviation = deviation


class SolverError(ConvergenceError):
    """A PnP iteration produced a non-finite iterate or an inner solve failed."""

    def __init__(self, msg, iteration):
        super().__init__(msg)
        self.iteration = iteration
