from typing import Optional


class RetroMCError(Exception):
    """Base class for all retromc errors"""


class DomainError(RetroMCError, ValueError):
    """Argument outside the domain of a numerical primitive"""


class ModelError(RetroMCError):
    """A model produced a non-finite bound or weight"""


class DivergenceError(RetroMCError):
    """A rejection loop exceeded its retry or point cap"""


class EstimationError(RetroMCError):
    """Monte Carlo statistics cannot be formed from the samples"""


class NumericalError(RetroMCError):
    """An inner optimization or quadrature did not converge"""


class ConfigError(RetroMCError):
    """Invalid experiment configuration"""

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        self.field = field
        self.line = line
        location = []
        if field:
            location.append(f"field '{field}'")
        if line is not None:
            location.append(f"line {line}")
        if location:
            message = f"{message} ({', '.join(location)})"
        super().__init__(message)
