class ShapeRegError(Exception):
    """General shapereg generated exceptions."""

    pass


class GeometryError(ShapeRegError):
    """Invalid or degenerate geometric input."""

    pass


class FormatError(ShapeRegError):
    """Unreadable or malformed file."""

    pass


class ConfigError(ShapeRegError):
    """Invalid configuration value or unknown configuration key."""

    pass


class CorruptionError(ShapeRegError):
    pass


class RegistrationError(ShapeRegError):
    pass


class CompletionError(ShapeRegError):
    pass


class MetricsError(ShapeRegError):
    pass
