"""Exception types shared across the package."""


class DomainError(ValueError):
    """An input lies outside the domain an operation is defined on."""


class UsageError(RuntimeError):
    """An API was called out of order (e.g. backward without a forward cache)."""


class ConfigError(ValueError):
    """A plan, scene file or CLI argument is malformed or inconsistent."""


class NumericError(ArithmeticError):
    """Non-finite values or a solver that failed to converge."""


class ProviderError(RuntimeError):
    """An inpainting, enhancement or depth provider failed to produce output."""
