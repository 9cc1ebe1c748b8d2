"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class SequenceTooShortError(ValueError):
    """Input sequence is shorter than a convolution's receptive field."""


class EmptySequenceError(ValueError):
    """A reduction over time received zero rows."""


class GraphError(RuntimeError):
    """Misuse of the differentiation tape (e.g. a second backward without reset)."""


class GradientAuditError(RuntimeError):
    """Finite-difference audit hit a non-finite function value."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ConfigError(ValueError):
    """Experiment configuration is invalid; ``field`` names the offender."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
