"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested operation."""


class ConfigError(ValueError):
    """A model configuration is internally inconsistent."""


class ComparisonError(ValueError):
    """Two cost reports cannot be compared (different input lengths)."""


class FormatError(ValueError):
    """A binary or text file does not conform to its declared format."""
