# acrkn/domain/errors.py


class AcrknError(Exception):
    """Base class for every error raised by the library."""


class NumericsError(AcrknError):
    pass


class CellError(AcrknError):
    pass


class ConfigError(AcrknError):
    pass


class DataError(AcrknError):
    pass


class CheckpointError(AcrknError):
    pass


class TrainingDivergedError(AcrknError):
    """
    Raised when a training loss becomes non-finite.
    Carries the 1-based epoch and 0-based batch index where it happened.
    """

    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"Training diverged at epoch {epoch}, batch {batch} (loss={loss})")

    def __reduce__(self):
        return type(self), (self.epoch, self.batch, self.loss)
