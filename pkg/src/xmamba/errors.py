"""Exception types raised across the package."""


class XMambaError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(XMambaError, ValueError):
    pass


class WidthMismatch(ShapeMismatch):
    """The two branches disagree on embedding width."""


class NotScalar(XMambaError, ValueError):
    pass


class TapeConsumed(XMambaError, RuntimeError):
    """backward() was called twice on the same graph."""


class NonFiniteError(XMambaError, ValueError):
    """A tensor would have been created holding NaN or Inf."""


class NonFiniteProbe(XMambaError, ArithmeticError):
    """A finite-difference probe evaluated to a non-finite value."""


class EmptySequence(XMambaError, ValueError):
    pass


class NonFiniteLoss(XMambaError, ArithmeticError):
    def __init__(self, epoch: int, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step
        self.value = value


class MissingBaseline(XMambaError, KeyError):
    pass
