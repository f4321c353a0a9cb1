"""Exception types shared by every stage."""


class ValidationError(ValueError):
    """An argument or input file violates a documented precondition."""


class DegenerateInputError(ValidationError):
    """Input is well-formed but the operation is undefined on it (e.g. a zero vector)."""


class DivergenceError(RuntimeError):
    """An iterative procedure produced a non-finite value."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
