"""Exception hierarchy shared across the package."""


class MednetError(Exception):
    """Base class for all package-specific failures."""


class DomainError(MednetError, ValueError):
    """Shape, range, or label contract violation in otherwise valid calls."""


class NonFiniteError(DomainError):
    """NaN or Inf entered a tensor; numerics, not call-shape, went wrong."""


class GraphError(MednetError, RuntimeError):
    """Misuse of the differentiation tape (double backward, cycles, bad seed)."""


class IOFailure(MednetError, OSError):
    """File missing, unreadable, or unwritable."""


class ConfigError(MednetError):
    """Config file violates the documented schema."""


class TrainingDiverged(MednetError):
    """Loss became non-finite during optimization."""
