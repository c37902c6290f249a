"""Exception hierarchy for qsdlab."""


class QSDLabError(Exception):
    """Base class for all library errors."""


class InvalidCoefficientError(QSDLabError, ValueError):
    """A diffusion coefficient or density is non-positive where it must be positive."""


class QuadratureError(QSDLabError, ArithmeticError):
    """An integral that should be finite on a compact set came out non-finite."""


class UnsupportedSpecError(QSDLabError, ValueError):
    """The diffusion violates a standing assumption (e.g. 0 not accessible)."""


class ClassificationInconclusiveError(QSDLabError):
    """Neither convergence nor divergence could be established within budget."""

    def __init__(self, message, partial_values=None):
        super().__init__(message)
        self.partial_values = partial_values


class GridBuildError(QSDLabError, ValueError):
    pass


class SeriesBudgetError(QSDLabError):
    pass


class BracketFailureError(QSDLabError):
    pass


class InvalidMomentError(QSDLabError, ValueError):
    pass


class UnsupportedSimulationError(QSDLabError, ValueError):
    pass


class UndefinedRatioError(QSDLabError, ZeroDivisionError):
    pass


class InsufficientTailError(QSDLabError):
    pass


class ConfigError(QSDLabError, ValueError):
    """Configuration problem; ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class RegimeWarning(UserWarning):
    """Numerical result outside the regime the theory covers (e.g. truncation artifact)."""


class TailTruncationWarning(UserWarning):
    pass


class CancellationWarning(UserWarning):
    pass
