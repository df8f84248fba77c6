"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class ContractViolation(ValueError):
    """A caller broke an operation's precondition."""


class TrainingDivergence(RuntimeError):
    """A loss or gradient became non-finite during training."""
