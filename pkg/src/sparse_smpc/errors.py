"""Exception hierarchy shared by every module of the package."""


class SmpcError(Exception):
    """Base class for all errors raised by sparse_smpc."""


class DimensionMismatch(SmpcError, ValueError):
    pass


class NumericalBreakdown(SmpcError):
    """The solver hit an ill-conditioned KKT system; loosen tolerances or rescale."""


class SolverFailure(SmpcError):
    pass


class InvalidSparsity(SmpcError, ValueError):
    pass


class NoiseBudgetExceeded(SmpcError):
    pass


class InfeasibleBudget(SmpcError):
    pass


class InvalidBounds(SmpcError, ValueError):
    pass


class UnboundedDirection(SmpcError):
    pass


class DimensionTooLarge(SmpcError, ValueError):
    pass


class SingularInnovation(SmpcError):
    pass


class EmptyDomain(SmpcError):
    """The feasible parameter set and the sparse parameter set do not intersect."""


class InfeasibleAtRuntime(SmpcError):
    """The receding-horizon problem became infeasible after a feasible start.

    ``program_text`` is a plain-text rendering of the offending program;
    ``dump`` is the file it was written to, if any.
    """

    def __init__(self, message, t=None, dump=None, program_text=None):
        super().__init__(message)
        self.t = t
        self.dump = dump
        self.program_text = program_text


class ConfigError(SmpcError, ValueError):
    pass
