class DualGuideError(Exception):
    """Base class for all package errors."""


class InvalidInputError(DualGuideError, ValueError):
    pass


class InvalidConfigError(DualGuideError, ValueError):
    pass


class InvalidTemplateError(InvalidInputError):
    pass


class SingularityError(DualGuideError, ArithmeticError):
    pass


class NonNormalizableTiltError(DualGuideError, ArithmeticError):
    """Combined guidance precision is not positive: no stationary Gaussian."""


class NoNegativeClassError(InvalidInputError):
    def __init__(self, msg="no negative class available"):
        super().__init__(msg)


class BackendError(DualGuideError, RuntimeError):
    """A backend evaluation failed; ``step`` is the sampler step index."""

    def __init__(self, msg, step=None):
        super().__init__(msg if step is None else f"step {step}: {msg}")
        self.step = step


class BackendUnavailableError(DualGuideError, RuntimeError):
    pass


class TrainingDivergedError(DualGuideError, FloatingPointError):
    pass


class EmbeddingFormatError(InvalidInputError):
    pass
