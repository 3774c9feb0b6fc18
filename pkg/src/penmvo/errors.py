"""Exception hierarchy shared by every module of the package."""


class PenmvoError(Exception):
    """Base class for all package errors."""


class DimensionError(PenmvoError, ValueError):
    """Array shapes are inconsistent with each other."""


class InvalidProblemError(PenmvoError, ValueError):
    """A problem violates a structural invariant (symmetry, PSD, rank, bounds)."""


class FactorizationError(PenmvoError):
    """A linear system could not be factorized.

    ``block`` names the matrix that failed so callers can report it.
    """

    def __init__(self, message: str, block: str = ""):
        super().__init__(message)
        self.block = block


class DivergenceError(PenmvoError):
    """An iterative method produced non-finite values."""


class NotConvergedError(PenmvoError):
    """A solution is required to be converged but is not."""


class InfeasibleError(PenmvoError):
    """A candidate solution violates primal or dual feasibility."""


class DegenerateCostError(PenmvoError, ValueError):
    """A decision cost is undefined for the given series (e.g. zero volatility)."""


class SolverFailure(PenmvoError):
    """A per-period or per-week solve failed inside a larger loop.

    ``index`` is the period position (training) and ``date`` the rebalance date
    (backtest) when known.
    """

    def __init__(self, message: str, index: int | None = None, date: str | None = None):
        super().__init__(message)
        self.index = index
        self.date = date
