"""Error hierarchy shared by the services and mapped onto CLI exit codes."""
from typing import Any, Dict, Optional, Sequence


class MGProtoError(Exception):
    """Base class for every error raised by the prototype services"""


class ContractViolation(MGProtoError, ValueError):
    """A shape, dimension or range precondition was not met"""


class DegeneratePosteriorError(MGProtoError, ArithmeticError):
    """Every class density is zero, so the posterior is undefined"""


class CheckpointFormatError(MGProtoError):
    """A checkpoint file could not be decoded"""


class ConfigError(MGProtoError):
    """Invalid experiment configuration"""


class ReportError(MGProtoError, OSError):
    """Report artefacts could not be written"""


class NonFiniteLossError(MGProtoError, FloatingPointError):
    """Training produced a NaN or infinite loss, feature or parameter"""

    def __init__(
        self,
        message: str,
        batch_indices: Sequence[int] = (),
        breakdown: Optional[Dict[str, Any]] = None
    ):
        super().__init__(message)
        self.batch_indices = list(batch_indices)
        self.breakdown = breakdown or {}
