"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A configuration value violates its contract."""


class ContractError(ValueError):
    """A runtime argument violates an operation's precondition."""


class CacheError(RuntimeError):
    """KV cache state is inconsistent with the tokens being fed."""


class CompatibilityError(RuntimeError):
    """An artifact does not match the model it is being used with."""


class TrainingDivergedError(RuntimeError):
    """Mask training produced a non-finite loss."""


class StageError(RuntimeError):
    """A pipeline stage failed; message carries the stage tag."""

    def __init__(self, stage, cause):
        super().__init__("[stage: %s] %s" % (stage, cause))
        self.stage = stage
        self.cause = cause
