from typing import Any, Dict, List, Optional

from .const import ErrorCode
from .dto import StrictBaseDTO


class HyperGsError(Exception):
    code: ErrorCode = ErrorCode.UNKNOWN

    def __init__(self, message: str = '', **details: Any) -> None:
        super().__init__(message or self.code.value)
        self.message = message or self.code.value
        self.details = details

    def report(self) -> 'ErrorReport':
        return ErrorReport(code=self.code, message=self.message, details=[self.details] if self.details else [])


class NotPositiveDefinite(HyperGsError):
    code = ErrorCode.NOT_POSITIVE_DEFINITE


class DimensionMismatch(HyperGsError):
    code = ErrorCode.DIMENSION_MISMATCH


class ZeroQuaternion(HyperGsError):
    code = ErrorCode.ZERO_QUATERNION


class DegenerateRotation(HyperGsError):
    code = ErrorCode.DEGENERATE_ROTATION


class LengthMismatch(HyperGsError):
    code = ErrorCode.LENGTH_MISMATCH


class NonFiniteLoss(HyperGsError):
    """
    Loss became nan/inf, the optimisation diverged; retry with a smaller learning rate
    """

    code = ErrorCode.NON_FINITE_LOSS


class UnknownPreset(HyperGsError):
    code = ErrorCode.UNKNOWN_PRESET


class ConfigError(HyperGsError):
    code = ErrorCode.CONFIG_ERROR


class ArtifactError(HyperGsError):
    code = ErrorCode.ARTIFACT_ERROR


class ErrorReport(StrictBaseDTO):
    code: ErrorCode
    message: str
    details: List[Dict[str, Any]] = []


def unknown_error(exc: BaseException, details: Optional[Dict[str, Any]] = None) -> ErrorReport:
    return ErrorReport(code=ErrorCode.UNKNOWN, message=str(exc) or type(exc).__name__, details=[details or {}])
