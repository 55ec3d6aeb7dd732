"""Exception hierarchy shared by every module."""


class KaczmarzError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(KaczmarzError, ValueError):
    """Operand dimensions do not conform."""


class DomainError(KaczmarzError, ValueError):
    """An argument lies outside the domain of the operation."""


class ConfigError(KaczmarzError, ValueError):
    """Invalid solver, problem or command-line configuration."""


class CapacityError(KaczmarzError, MemoryError):
    """A guarded operation would produce an oversized result."""


class ConvergenceError(KaczmarzError, RuntimeError):
    """An inner iterative routine ran out of iterations."""

    def __init__(self, message, last_estimate=None):
        super().__init__(message)
        self.last_estimate = last_estimate


class DecompositionError(ConvergenceError):
    """A matrix factorization did not converge."""


class SelectionError(KaczmarzError, RuntimeError):
    """A row-selection rule produced an invalid row."""


class DivergenceError(KaczmarzError, RuntimeError):
    """Non-finite values appeared in the iterate."""

    def __init__(self, message, iteration, residual_norm):
        super().__init__(message)
        self.iteration = iteration
        self.residual_norm = residual_norm


class InconsistentSystemError(KaczmarzError, ValueError):
    """The right-hand side is not in the range of X -> AXB."""


class MatrixMarketError(KaczmarzError, ValueError):
    """Malformed Matrix Market input."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
