"""Exception taxonomy shared by all modules."""


class LorashapError(Exception):
    """Base class for every error raised by this package."""


class ContractError(LorashapError):
    """A documented precondition was violated by the caller."""


class DimensionError(LorashapError):
    """Operand shapes do not conform to the op's rule."""


class NumericError(LorashapError):
    """A computation produced or received non-finite values."""


class DataError(LorashapError):
    """Invalid data content (out-of-range token ids, bad dtypes)."""


class ConfigError(LorashapError):
    """Invalid or inconsistent configuration."""


class StateError(LorashapError):
    """Operation not valid in the object's current state."""


class BudgetError(LorashapError):
    """Requested rank budget exceeds what is available."""


class CapacityError(LorashapError):
    """Problem size exceeds a hard implementation limit."""


class TrainingError(LorashapError):
    """Training failed; carries the step index where it happened."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class ScheduleError(LorashapError):
    """A pruning schedule cannot reach its target."""


class IntegrityError(LorashapError):
    """A persisted artifact failed its checksum or structure check."""
