from __future__ import annotations

from typing import Iterable, Optional


class MiaError(Exception):
    """Base class of every error raised by miaudit."""


class FormatError(MiaError, ValueError):
    pass


class ValidationError(MiaError, ValueError):
    def __init__(self, message: str, row: Optional[int] = None) -> None:
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class EmptyDatasetError(ValidationError):
    pass


class CapacityError(MiaError, ValueError):
    pass


class ConfigurationError(MiaError, ValueError):
    pass


class ManifestError(ConfigurationError):
    def __init__(self, field: str, message: str) -> None:
        super().__init__(f"{field}: {message}")
        self.field = field


class DivergenceError(MiaError, ArithmeticError):
    def __init__(self, message: str, step: Optional[int] = None) -> None:
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class CoverageError(MiaError):
    def __init__(self, message: str, sample_ids: Iterable[int] = ()) -> None:
        self.sample_ids = [int(i) for i in sample_ids]
        shown = ", ".join(str(i) for i in self.sample_ids[:20])
        if len(self.sample_ids) > 20:
            shown += ", ..."
        super().__init__(f"{message}: [{shown}]")


class SingularityError(MiaError, ArithmeticError):
    pass


class ThreatModelError(MiaError):
    pass


class ContaminationError(MiaError):
    pass


class DomainError(MiaError, ValueError):
    pass
