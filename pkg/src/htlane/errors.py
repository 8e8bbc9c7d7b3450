"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor extents do not line up."""


class DomainError(ValueError):
    """A pointwise op received a value outside its domain."""


class DataError(ValueError):
    """Labels or targets are malformed or missing."""


class FormatError(ValueError):
    """A file on disk is truncated, corrupt or inconsistent."""


class ConfigError(ValueError):
    """Invalid or contradictory configuration."""
