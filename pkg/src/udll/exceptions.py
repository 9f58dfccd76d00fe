class UDLLError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(UDLLError, ValueError):
    pass


class DivergenceError(UDLLError, FloatingPointError):
    """A loss or gradient became non-finite during training."""

    def __init__(self, message, epoch=None, last_terms=None):
        super().__init__(message)
        self.epoch = epoch
        self.last_terms = last_terms


class DataFormatError(UDLLError, ValueError):
    """A dataset, graph, or checkpoint file is malformed."""


class ConvergenceError(UDLLError, RuntimeError):
    pass
