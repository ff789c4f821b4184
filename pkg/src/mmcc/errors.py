"""Exception hierarchy shared by all mmcc modules."""


class MMCCError(Exception):
    """Base class for all package errors."""


class DimensionError(MMCCError, ValueError):
    """Shape mismatch between an operation and its inputs."""


class UsageError(MMCCError, RuntimeError):
    """An API was called out of order (e.g. backward before forward)."""


class ConfigurationError(MMCCError, ValueError):
    """Invalid structural configuration (heads, groups, problem specs)."""


class ContractError(MMCCError, ValueError):
    """A documented precondition was violated by the caller."""


class PoisonedStepError(MMCCError, FloatingPointError):
    """An optimizer step received a non-finite gradient component."""

    def __init__(self, index: int, value: float):
        super().__init__(f"non-finite gradient component {value!r} at parameter index {index}")
        self.index = index
        self.value = value


class NumericalFailure(MMCCError, FloatingPointError):
    """Base for simulation-time numerical failures (path blowups, bad utilities)."""


class PathBlowupError(NumericalFailure):
    def __init__(self, period: int, path: int):
        super().__init__(f"non-finite state at period {period}, path {path}")
        self.period = period
        self.path = path


class NonFiniteUtilityError(NumericalFailure):
    def __init__(self, path: int):
        super().__init__(f"non-finite utility on path {path}")
        self.path = path


class InfeasibleStateError(NumericalFailure):
    """A state left its feasible region (e.g. non-positive capital)."""


class PeriodUpdateAborted(MMCCError):
    """Raised by the minibatch loop when a period update must be rejected."""

    def __init__(self, cause: BaseException):
        super().__init__(f"period update aborted: {cause}")
        self.cause = cause


class ConvergenceError(MMCCError, ArithmeticError):
    """A numerical oracle failed its own convergence check."""
