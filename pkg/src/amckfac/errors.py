"""Exception hierarchy shared by the solver stack."""


class AmcError(Exception):
    """Base class for every error raised by this package."""


class ContractError(AmcError, ValueError):
    """Inputs violate a shape, range or type contract."""


class UndefinedMetricError(AmcError, ValueError):
    """A metric was requested for a reference of zero norm."""


class DegenerateMappingError(AmcError, ValueError):
    """An all-zero matrix cannot be mapped onto conductances."""


class CircuitUnstableError(AmcError):
    """The programmed crossbar matrix is numerically singular."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class SolverError(AmcError):
    """Base for iterative/recursive solver failures.

    ``path`` collects block-recursion context (outermost first) as the error
    propagates up through ``block_solve``.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
        self.path = []

    def annotate(self, where):
        self.path.insert(0, where)
        return self

    def __str__(self):
        base = super().__str__()
        if self.path:
            return f"[{' > '.join(self.path)}] {base}"
        return base


class DivergenceError(SolverError):
    """Refinement residual kept growing."""

    def __init__(self, message, report=None, condition=None, contraction=None):
        super().__init__(message, report)
        self.condition = condition
        self.contraction = contraction


class NonConvergenceError(SolverError):
    """Refinement hit ``max_iters`` before reaching the tolerance."""


class SingularSchurError(SolverError):
    """A Schur complement met during block elimination is singular."""


class ParseError(AmcError, ValueError):
    """Malformed input file."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DatasetError(AmcError, ValueError):
    """Requested split cannot be drawn from the available data."""
