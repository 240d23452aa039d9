"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array or map dimensions do not match what an operation expects."""


class NumericError(ArithmeticError):
    """Non-finite values reached a numeric kernel."""


class SpecError(ValueError):
    """A network or model description is malformed."""


class AnalysisError(ValueError):
    """A memory analysis was asked about an unsupported segment."""


class PlanningError(RuntimeError):
    """No execution plan satisfies the requested constraint."""


class SizeCapError(ValueError):
    """An exhaustive search was asked to handle too many nodes."""


class TrainingError(RuntimeError):
    """Training diverged."""

    def __init__(self, message, diagnostics=None):
        self.diagnostics = diagnostics or {}
        if self.diagnostics:
            detail = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
            message = f"{message} ({detail})"
        super().__init__(message)


class QuantizationError(ValueError):
    """A layer cannot be run in the integer pipeline."""
