"""Exception hierarchy shared by all modules."""


class NonlocalDesignError(Exception):
    """Base class for every error raised by this package."""


class ParameterError(NonlocalDesignError, ValueError):
    """An argument is outside its admissible range."""


class ConfigurationError(NonlocalDesignError):
    """Inputs are individually valid but inconsistent with each other."""


class NumericalIntegrityError(NonlocalDesignError):
    """A computed object violates a property it must have (e.g. SPD)."""


class SolverError(NonlocalDesignError):
    """An iterative solve did not reach its tolerance.

    Attributes
    ----------
    residual : float
        Relative residual at the last iterate.
    iterations : int
        Number of iterations performed.
    """

    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class OracleError(NonlocalDesignError):
    """A reference computation could not reach its accuracy budget."""
