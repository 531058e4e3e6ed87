"""Exception types shared across the package."""


class SheomError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(SheomError, ValueError):
    """Operator dimensions are inconsistent."""


class ResonanceError(SheomError, ValueError):
    """A dispersive denominator collides with a system transition."""


class PoleError(SheomError, ValueError):
    """A Matsubara frequency coincides with the bath cut-off."""


class ConfigError(SheomError, ValueError):
    """A run configuration is malformed or violates the schema."""


class AllDivergedError(SheomError, RuntimeError):
    """Every trajectory of an ensemble diverged; no average exists."""
