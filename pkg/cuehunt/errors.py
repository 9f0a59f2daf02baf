class CueHuntError(Exception):
    """Base class for all errors raised by cuehunt."""


class ConfigurationError(CueHuntError, ValueError):
    """Invalid configuration values, unknown config keys or incompatible sizes."""


class ShapeError(ConfigurationError):
    """Tensor dimensions do not fit the operation."""


class ContractError(CueHuntError, ValueError):
    """An operation was called outside its precondition."""


class NumericalError(CueHuntError, ArithmeticError):
    """A NaN or infinite value was produced."""

    def __init__(self, op, step=None):
        self.op = op
        self.step = step
        where = f" at training step {step}" if step is not None else ""
        super().__init__(f"Non-finite value produced by '{op}'{where}")


class IngestionError(CueHuntError, OSError):
    """A dataset on disk could not be ingested."""

    def __init__(self, path, reason):
        self.path = str(path)
        super().__init__(f"{reason}: {path}")


class GenerationError(CueHuntError, RuntimeError):
    """A scene could not be generated (e.g. objects do not fit on the canvas)."""


class CheckpointError(CueHuntError, ValueError):
    """A checkpoint file is corrupt or incompatible.

    ``incompatible`` marks a readable file written for another format version
    or architecture, as opposed to a damaged one.
    """

    def __init__(self, message, incompatible=False):
        self.incompatible = incompatible
        super().__init__(message)
