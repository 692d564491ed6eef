class DomainError(ValueError):
    """An argument lies outside the domain of the operation."""


class UsageError(RuntimeError):
    """An operation was invoked in a state where it is not allowed."""


class ConvergenceError(RuntimeError):
    """An iterative solver hit its iteration cap before meeting tolerance."""
