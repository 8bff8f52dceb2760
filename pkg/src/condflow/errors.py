class CondflowError(Exception):
    pass


class InvalidArgument(CondflowError, ValueError):
    pass


class InsufficientData(CondflowError, ValueError):
    pass


class Unsupported(CondflowError, NotImplementedError):
    pass


class InvalidState(CondflowError, RuntimeError):
    pass


class NumericalFailure(CondflowError, ArithmeticError):
    """A coefficient or functional produced a non-finite value."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step
