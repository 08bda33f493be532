"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class ConfigError(ValueError):
    """A configuration value is inconsistent or out of range."""


class ContractError(ValueError):
    """An argument violates an operation's precondition."""


class FormatError(IOError):
    """A serialized file is corrupt, truncated, or of the wrong version."""


class TrainingDivergenceError(RuntimeError):
    """A loss component or gradient became non-finite during training."""
