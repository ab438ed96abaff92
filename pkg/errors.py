from typing import List, Optional, Any


class MeanFieldError(Exception):
    """Base class for all solver and analysis errors"""


class DimensionMismatchError(MeanFieldError, ValueError):
    """Operands do not share particle count or state dimension"""


class UnsupportedInstanceError(MeanFieldError, ValueError):
    """Instance outside what the exact routines handle"""


class HypothesisViolation(MeanFieldError, ValueError):
    """A problem specification breaks one of the standing hypotheses"""

    def __init__(self, tags: List[str], message: str, report: Optional[Any] = None):
        super().__init__(f"{', '.join(tags)}: {message}")
        self.tags = list(tags)
        self.report = report


class DivergenceError(MeanFieldError, ArithmeticError):
    """Integration produced non-finite values"""

    def __init__(self, step: int, message: str = "non-finite state"):
        super().__init__(f"{message} at step {step}")
        self.step = step


class ConvergenceError(MeanFieldError, RuntimeError):
    """An inner iteration failed to reach its tolerance"""

    def __init__(self, residual: float, message: str = "iteration did not converge"):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


class ConfigError(MeanFieldError, ValueError):
    """Experiment configuration failed the strict schema"""

    def __init__(self, diagnostics: List[str]):
        super().__init__("; ".join(diagnostics))
        self.diagnostics = list(diagnostics)
