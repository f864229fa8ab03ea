"""Exception hierarchy. The CLI maps these onto stable exit codes."""


class CodecError(ValueError):
    """A file or stream does not match its declared format."""


class NumericError(ValueError):
    """Input is numerically invalid for an operation (non-stochastic, degenerate, ...)."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""

    def __init__(self, step, loss):
        super().__init__(f"loss became non-finite ({loss}) at step {step}")
        self.step = step
        self.loss = loss
