"""
Exception hierarchy for homopursuit
"""
from typing import Optional


class HomoPursuitError(Exception):
    """Base class for all library errors"""


class ArgumentError(HomoPursuitError, ValueError):
    """Invalid argument: bad mode, dimension mismatch, rank out of range"""


class NumericError(HomoPursuitError, ArithmeticError):
    """Non-finite input or intermediate value"""


class SingularityError(NumericError):
    """Matrix singular even after ridge regularization"""


class DivergenceError(NumericError):
    """Loss became non-finite, or rose far above its starting value, during a fit"""

    def __init__(self, eta: float, iteration: int, individual: Optional[int] = None):
        self.eta = eta
        self.iteration = iteration
        self.individual = individual
        where = f" for individual {individual}" if individual is not None else ""
        super().__init__(
            f"Loss diverged{where} at iteration {iteration} with step size eta={eta:g}; "
            f"try a smaller eta"
        )


class ConfigError(HomoPursuitError, ValueError):
    """Malformed or invalid configuration file"""


class DatasetError(HomoPursuitError):
    """Missing or inconsistent dataset files"""
