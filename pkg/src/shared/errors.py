"""
Exception hierarchy shared by the library and the command line.

Each error carries a machine-readable code and the process exit code the CLI
uses when the error reaches the command boundary.
"""
from typing import Any, Dict, Optional


class PrerankcalError(Exception):
    """Base class for all handled errors."""

    error_code = "prerankcal_error"
    exit_code = 1

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}


class ContractViolationError(PrerankcalError):
    """A documented precondition of an operation does not hold."""

    error_code = "contract_violation"
    exit_code = 2


class UsageError(PrerankcalError):
    """Conflicting or invalid command-line usage."""

    error_code = "usage_error"
    exit_code = 2


class PreRankConfigError(ContractViolationError):
    """A pre-rank is not defined for the requested output dimension."""

    error_code = "prerank_config_error"


class UnsupportedOperationError(PrerankcalError):
    """An operation cannot be recorded in the differentiation graph."""

    error_code = "unsupported_operation"
    exit_code = 2


class DataFormatError(PrerankcalError):
    """Input data cannot be ingested."""

    error_code = "data_format_error"
    exit_code = 3


class UndefinedMetricError(PrerankcalError):
    """A metric was requested on an empty batch."""

    error_code = "undefined_metric"
    exit_code = 3


class InsufficientSamplesError(PrerankcalError):
    """Too few samples for the requested estimate."""

    error_code = "insufficient_samples"
    exit_code = 3


class NumericalFailureError(PrerankcalError):
    """A loss or gradient became non-finite."""

    error_code = "numerical_failure"
    exit_code = 4

    def __init__(
        self,
        message: str,
        batch_index: Optional[int] = None,
        details: Optional[Dict[str, Any]] = None,
    ):
        merged = dict(details or {})
        if batch_index is not None:
            merged["batch_index"] = batch_index
        super().__init__(message, merged)
        self.batch_index = batch_index
