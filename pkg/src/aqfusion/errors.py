"""Exception types shared across the package."""


class AQFusionError(Exception):
    """Base class for all package errors."""


class ShapeError(AQFusionError, ValueError):
    """Tensor extents are incompatible with an operation."""


class ParameterError(AQFusionError, ValueError):
    """An argument is outside its documented domain."""


class ContractError(AQFusionError, RuntimeError):
    """A call violated a precondition of the computation graph or optimizer."""


class DivergenceError(AQFusionError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, batch, loss):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")


class DataError(AQFusionError):
    """A dataset or manifest could not be read."""
