"""Error types shared across the package."""


class ConfigurationError(ValueError):
    """A config field holds an invalid value. Message names the field."""


class ContractViolation(RuntimeError):
    """An internal precondition was broken (frozen weights touched,
    non-normalized rows where unit norm is required, malformed bank update)."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
