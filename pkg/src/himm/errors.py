"""Exception hierarchy shared across the package."""


class HimmError(Exception):
    """Base class for all package errors."""


class ShapeError(HimmError, ValueError):
    """Array dimensions do not match the model shape."""


class ParamValidationError(HimmError, ValueError):
    """Parameters have the right shape but violate a model invariant."""

    def __init__(self, violations):
        self.violations = list(violations)
        lines = "\n  ".join(str(v) for v in self.violations)
        super().__init__(f"{len(self.violations)} parameter violation(s):\n  {lines}")


class FormatError(HimmError, ValueError):
    """A parameter, config or table file could not be parsed."""


class ConfigError(HimmError, ValueError):
    """A run or physical configuration is invalid."""


class DegenerateEvidenceError(HimmError, ArithmeticError):
    """The observation has zero probability under the model at some slot."""

    def __init__(self, t, message=None):
        self.t = t
        super().__init__(message or f"zero observation mass at slot t={t}")
