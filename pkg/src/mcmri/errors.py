"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input array fails a shape/finiteness contract."""


class ConfigurationError(ValueError):
    """Configuration values are inconsistent or out of range."""


class InfeasibleBudgetError(ConfigurationError):
    """Sampling budget cannot accommodate the preselected columns."""


class DomainError(ValueError):
    """Scalar argument outside the mathematical domain of the operation."""


class StateError(RuntimeError):
    """Operation requires state (e.g. trained weights) that is not present."""
