"""Exception hierarchy shared by all modules."""
from __future__ import annotations


class CuepError(Exception):
    """Base class for every error raised by the package."""


class DataError(CuepError):
    """Invalid numeric data (zero impedance, bad machine constants, ...)."""


class TopologyError(CuepError):
    """The in-service network graph is disconnected."""


class InputError(CuepError):
    """A caller asked for something that does not exist or is not allowed."""


class DegeneracyError(CuepError):
    """A conversion is unreliable because voltages collapsed."""


class DivergenceError(CuepError):
    """An iterative solver failed to converge.

    The last iterate and its residual are kept so that callers can tell a
    numerical hiccup from the approach to a nose point.
    """

    def __init__(self, message: str, last_iterate=None, mismatch: float = float("nan"),
                 iterations: int = 0):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.mismatch = mismatch
        self.iterations = iterations


class BracketingError(CuepError):
    """Bisection endpoints do not bracket a sign change."""


class InitializationError(CuepError):
    """Dynamic state initialization failed."""


class NoEquilibriumError(CuepError):
    """Newton's method found no equilibrium from the given seed."""


class NearBifurcationError(CuepError):
    """The equilibrium Jacobian became singular during Newton iteration."""

    def __init__(self, message: str, sigma_min: float = float("nan")):
        super().__init__(message)
        self.sigma_min = sigma_min


class NoBoundaryUEPError(CuepError):
    """No UEP was certified to lie on the stability boundary."""


class ConsistencyError(CuepError):
    """An internal invariant was violated (for example the SEP cell is not in-region)."""


class ConfigError(CuepError):
    """A scenario or fixture file is malformed."""


class ScenarioError(CuepError):
    """The base case of a scenario could not be computed."""
