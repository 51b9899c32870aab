"""Exception types raised across the package."""


class TokenTrajError(Exception):
    """Base class for all package-specific errors."""


class DomainError(TokenTrajError, ValueError):
    """An input value is outside the mathematical domain of an operation."""


class GeometryError(TokenTrajError, ValueError):
    """Degenerate geometric input (e.g. coincident polyline points)."""


class ShapeError(TokenTrajError, ValueError):
    """Tensor or array shapes are inconsistent."""


class ConfigError(TokenTrajError, ValueError):
    """A configuration value is invalid."""


class UsageError(TokenTrajError, ValueError):
    """An API was called in an unsupported way."""


class ParseError(TokenTrajError, ValueError):
    """A data file could not be parsed."""


class ValidationError(TokenTrajError, ValueError):
    """Parsed data violates a documented invariant."""


class NumericsError(TokenTrajError, RuntimeError):
    """A numerical failure (non-finite values) was detected."""
