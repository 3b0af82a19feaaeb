"""Exception hierarchy; each family maps to a CLI exit code."""
from typing import Any, Optional


class CopulaSMMError(Exception):
    exit_code = 1


class ConfigError(CopulaSMMError):
    exit_code = 2


class MomentSpecError(ConfigError):
    pass


class DataError(CopulaSMMError):
    exit_code = 3


class NumericalError(CopulaSMMError):
    exit_code = 4


class ParameterDomainError(NumericalError, ValueError):
    """A distribution or model parameter lies outside its domain."""

    def __init__(self, slot: str, value: Any, domain: str):
        self.slot = slot
        self.value = value
        super().__init__(f"parameter '{slot}'={value!r} outside domain {domain}")


class FitError(NumericalError):
    """Margin fit did not converge; `best` holds the best-so-far fit."""

    def __init__(self, message: str, best: Optional[Any] = None):
        super().__init__(message)
        self.best = best


class InferenceError(NumericalError):
    pass


class McRunError(NumericalError):
    pass
