"""
Exception types raised by proxfed.

The command line maps them to exit codes: ConfigError -> 2,
SolverError / DomainError -> 3.
"""
from typing import Optional


class ProxFedError(Exception):
    """Base class for all proxfed errors."""


class ConfigError(ProxFedError, ValueError):
    """Invalid configuration or violated operation precondition."""

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        if field and field not in message:
            message = f"{field}: {message}"
        super().__init__(message)


class SolverError(ProxFedError, RuntimeError):
    """An inner solver hit its iteration cap."""

    def __init__(self, message: str, best_certificate: float = float('inf'),
                 iterations: int = 0):
        self.best_certificate = best_certificate
        self.iterations = iterations
        super().__init__(f"{message} (best certificate {best_certificate:.3e} "
                         f"after {iterations} iterations)")


class DomainError(ProxFedError, RuntimeError):
    """An iterate left the ball on which the loss constants are certified."""

    def __init__(self, round_index: int, norm: float, radius: float):
        self.round = round_index
        self.norm = norm
        self.radius = radius
        super().__init__(f"iterate left the domain ball at round {round_index}: "
                         f"||w|| = {norm:.6g} > radius {radius:.6g}")


class DiagnosticError(ProxFedError, ValueError):
    """A diagnostic was requested for a loss kind that does not support it."""
