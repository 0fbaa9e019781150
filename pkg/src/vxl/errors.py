"""Exception types shared across the package."""


class VxlError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(VxlError):
    """Operands have incompatible shapes."""


class NonFiniteError(VxlError):
    """A NaN or Inf appeared where only finite values are allowed."""


class WindowError(VxlError):
    """A sequence or chunk does not fit the model's context window."""


class PlanError(VxlError):
    """A compression plan is inconsistent with its input sequence."""


class VocabError(VxlError):
    """A token id falls outside the configured vocabulary."""


class FormatError(VxlError):
    """A serialized artifact is malformed."""


class TrainingDiverged(VxlError):
    """Training loss exceeded the divergence threshold."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"loss diverged to {loss:.3e} at step {step}")
        self.step = step
        self.loss = loss
