# src/core/exceptions.py
from typing import Any, Optional


class ConfigurationError(ValueError):
    """Malformed run configuration: unknown keys, bad values, missing presets."""


class IntegrationAborted(RuntimeError):
    """A numerical run stopped because a hygiene check failed.

    `reason` is one of "trace", "leak", "nan", "hermiticity", "positivity", "truncation".
    """

    def __init__(self, reason: str, message: str, time: Optional[float] = None):
        super().__init__(message)
        self.reason = reason
        self.time = time


class FitRejected(RuntimeError):
    """Quasi-stationary fit did not reach the required r^2; the report is kept for diagnostics."""

    def __init__(self, message: str, report: Any = None):
        super().__init__(message)
        self.report = report
