"""Exception types raised across the package."""


class MorbitError(Exception):
    """Base class for all package errors."""

    # set by weighted reductions so callers know which task failed
    task = None


class DomainError(MorbitError, ValueError):
    """An input lies outside the domain where an operation is defined."""


class ShapeError(MorbitError, ValueError):
    """Array dimensions do not match what the operation expects."""


class ParseError(MorbitError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NotStronglyConvex(MorbitError, ArithmeticError):
    """Inner Hessian failed a positive-definiteness check."""


class SolveDiverged(MorbitError, ArithmeticError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class NumericalDivergence(MorbitError, ArithmeticError):
    def __init__(self, message, k=None, trajectory=None):
        super().__init__(message)
        self.k = k
        self.trajectory = trajectory if trajectory is not None else []


class UnsupportedProblem(MorbitError, NotImplementedError):
    """The problem does not expose an oracle the operation needs."""


class InnerSolveBudgetExceeded(MorbitError, RuntimeError):
    def __init__(self, message, grad_norm=None):
        super().__init__(message)
        self.grad_norm = grad_norm


class ProxBudgetExceeded(MorbitError, RuntimeError):
    def __init__(self, message, last_gap=None):
        super().__init__(message)
        self.last_gap = last_gap


class ConfigError(MorbitError, ValueError):
    def __init__(self, message, field=None, line=None):
        where = []
        if field is not None:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{', '.join(where)}: {message}"
        super().__init__(message)
        self.field = field
        self.line = line
