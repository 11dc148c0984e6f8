"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI lives in :mod:`fracsde.cli`; library code
raises these and never calls ``sys.exit`` itself.
"""


class FracSDEError(Exception):
    """Base class for all package errors."""


class DomainError(FracSDEError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class UnsupportedRegimeError(FracSDEError, ValueError):
    """A Hurst/integrability regime outside what the implementation supports."""


class RegimeRefusal(FracSDEError):
    """An experiment was refused because the (H, d, p, q) regime check failed.

    Carries the violated inequality so callers can surface it verbatim.
    """

    def __init__(self, message: str, violated: str = ""):
        super().__init__(message)
        self.violated = violated or message


class NumericError(FracSDEError):
    """A hard numerical failure (factorization, eigenvalue, exclusion budget)."""


class CoupledGeneratorRequired(FracSDEError):
    """An operation needed the Wiener increments but the ensemble has none."""


class ConfigError(FracSDEError):
    """A configuration file or CLI flag failed schema validation."""

    def __init__(self, message: str, field: str = ""):
        super().__init__(message)
        self.field = field
