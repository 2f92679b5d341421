"""Exception types shared across the package."""


class RladError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(RladError, ValueError):
    """Invalid configuration value (bad schedule bounds, bad split fractions, ...)."""


class DomainError(RladError, ValueError):
    """Value outside the mathematical domain of an operation (timestep out of range, ...)."""


class ShapeError(RladError, ValueError):
    """Array shape does not match the operation's contract."""


class StructureError(RladError, ValueError):
    """Structured input (token sequence, pair link, manifest) is malformed."""


class TrainingFailure(RladError, RuntimeError):
    """A training run did not reach its contractual quality bar."""
