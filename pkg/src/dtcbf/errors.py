"""Exception hierarchy shared by all modules."""


class DtcbfError(Exception):
    """Base class for errors raised by this package."""


class ContractViolation(DtcbfError, ValueError):
    """Arguments violate a documented precondition (usually dimensions)."""


class InputBoundsError(DtcbfError, ValueError):
    """An input vector lies outside the admissible input box."""


class WrongVariantError(DtcbfError, TypeError):
    """An operation received a barrier of the wrong variant."""


class NoActivePieceError(DtcbfError, ValueError):
    """No guard of a piecewise barrier holds at the evaluation point."""


class DomainError(DtcbfError, ValueError):
    """A state lies outside the domain where an operation is defined."""


class UnsafeStateError(DomainError):
    """The lane-keeping barrier is undefined because the state is already unsafe."""

    def __init__(self, y, v, message=None):
        self.y = float(y)
        self.v = float(v)
        super().__init__(message or f"state (y={self.y:.6g}, v={self.v:.6g}) is outside the barrier domain")


class ArityError(DtcbfError, ValueError):
    """A Boolean composition was given the wrong number of operands."""


class DefinitenessError(DtcbfError, ValueError):
    """The quadratic cost matrix is not symmetric positive definite."""


class SolverFailure(DtcbfError, RuntimeError):
    """The QP core failed to converge or to certify its answer."""


class ResourceLimitError(DtcbfError, RuntimeError):
    """A node, leaf or branch-point budget was exceeded."""


class ControllabilityError(DtcbfError, ValueError):
    """The pair (A, B) is uncontrollable or too ill-conditioned for pole placement."""


class SimulationError(DtcbfError, RuntimeError):
    """A closed-loop run stopped early; ``trace`` holds the steps completed so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
