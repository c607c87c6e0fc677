import datetime
import logging
from typing import Any, Dict, List, Optional

logger = logging.getLogger(__name__)


# Define error types as constants for consistency
class ErrorType:
    VALIDATION_ERROR = "validation_error"
    INPUT_ERROR = "input_error"
    NUMERIC_ERROR = "numeric_error"
    INTERNAL_ERROR = "internal_error"


# Error code prefixes
# 1xx: Validation errors (bad parameters, configs, scenarios)
# 2xx: Input errors (files and their contents)
# 9xx: Numeric failures (non-convergence, degenerate data)

ERROR_CODES = {
    # Validation errors (100-199)
    "invalid_parameter": 101,
    "parameter_out_of_range": 102,
    "invalid_config": 103,
    "unknown_preset": 104,
    "invalid_scenario": 105,
    "insufficient_data": 106,
    "unpaired_samples": 107,

    # Input errors (200-299)
    "file_not_found": 201,
    "malformed_line": 202,
    "duplicate_position": 203,
    "count_exceeds_depth": 204,
    "inconsistent_samples": 205,
    "position_sets_differ": 206,
    "unsorted_positions": 207,
    "invalid_model_document": 208,
    "missing_region": 209,

    # Numeric failures (900-999)
    "non_convergence": 901,
    "not_bracketed": 902,
    "degenerate_input": 903,
    "decision_inconsistency": 904,
    "identity_violation": 905,
}

# Process exit status per error type; harnesses rely on these
EXIT_CODES = {
    ErrorType.VALIDATION_ERROR: 1,
    ErrorType.INPUT_ERROR: 1,
    ErrorType.NUMERIC_ERROR: 2,
    ErrorType.INTERNAL_ERROR: 2,
}


def get_error_code(error_key: str) -> int:
    """Get the numeric error code for a given error key"""
    return ERROR_CODES.get(error_key, 999)


class RarevarError(Exception):
    """
    Base class for every error the library raises on purpose.

    Carries the same detail fields the error report exposes so that the
    command line can render a structured message and pick an exit code.
    """
    error_type = ErrorType.INTERNAL_ERROR
    default_code = "decision_inconsistency"

    def __init__(
        self,
        message: str,
        error_code: Optional[str] = None,
        invalid_fields: Optional[Dict[str, str]] = None,
        resource_id: Optional[str] = None,
        line_number: Optional[int] = None,
        recovery_hint: Optional[str] = None,
    ):
        super().__init__(message)
        self.message = message
        self.code_name = error_code or self.default_code
        self.invalid_fields = invalid_fields or {}
        self.resource_id = resource_id
        self.line_number = line_number
        self.recovery_hint = recovery_hint

    @property
    def code(self) -> int:
        return get_error_code(self.code_name)

    @property
    def exit_code(self) -> int:
        return EXIT_CODES.get(self.error_type, 2)

    def __str__(self) -> str:
        location = ""
        if self.resource_id:
            location = f" [{self.resource_id}"
            if self.line_number is not None:
                location += f", line {self.line_number}"
            location += "]"
        return f"{self.message}{location}"


class ValidationError(RarevarError):
    error_type = ErrorType.VALIDATION_ERROR
    default_code = "invalid_parameter"


class InputError(RarevarError):
    error_type = ErrorType.INPUT_ERROR
    default_code = "malformed_line"


class NumericError(RarevarError):
    error_type = ErrorType.NUMERIC_ERROR
    default_code = "non_convergence"


def format_error_report(error: RarevarError) -> Dict[str, Any]:
    """
    Format a detailed error report

    Args:
        error: The raised library error

    Returns:
        Dictionary with the same layout for every error type
    """
    report = {
        "success": False,
        "error": {
            "message": error.message,
            "type": error.error_type,
            "code": error.code,
            "code_name": error.code_name,
            "timestamp": datetime.datetime.now().isoformat(),
        },
    }

    # Add optional fields if provided
    if error.invalid_fields:
        report["error"]["invalid_fields"] = error.invalid_fields

    if error.resource_id:
        report["error"]["resource_id"] = error.resource_id

    if error.line_number is not None:
        report["error"]["line_number"] = error.line_number

    if error.recovery_hint:
        report["error"]["recovery_hint"] = error.recovery_hint

    return report


# Convenience functions for common error types

def validation_error(
    message: str,
    error_code: str = "invalid_parameter",
    invalid_fields: Optional[Dict[str, str]] = None,
    recovery_hint: Optional[str] = None,
) -> ValidationError:
    """Convenience function for validation errors"""
    if not invalid_fields:
        invalid_fields = {}

    # Build the recovery hint from the offending fields
    enhanced_recovery_hint = recovery_hint
    if invalid_fields and not recovery_hint:
        field_hints = []
        for field, error in invalid_fields.items():
            field_hints.append(f"'{field}': {error}")
        enhanced_recovery_hint = "Fix the following fields: " + ", ".join(field_hints)

    return ValidationError(
        message,
        error_code=error_code,
        invalid_fields=invalid_fields,
        recovery_hint=enhanced_recovery_hint,
    )


def input_error(
    message: str,
    path: Optional[str] = None,
    line_number: Optional[int] = None,
    error_code: str = "malformed_line",
    recovery_hint: Optional[str] = None,
) -> InputError:
    """Convenience function for file and format errors"""
    if not recovery_hint and error_code == "file_not_found":
        recovery_hint = f"Check that '{path}' exists and is readable"
    elif not recovery_hint and line_number is not None:
        recovery_hint = "See docs/data_format.md for the expected columns"

    return InputError(
        message,
        error_code=error_code,
        resource_id=str(path) if path is not None else None,
        line_number=line_number,
        recovery_hint=recovery_hint,
    )


def numeric_error(
    message: str,
    error_code: str = "non_convergence",
    recovery_hint: Optional[str] = None,
    related_options: Optional[List[str]] = None,
) -> NumericError:
    """Convenience function for numeric failures"""
    if not recovery_hint and related_options:
        recovery_hint = "Try adjusting: " + ", ".join(related_options)

    logger.error(f"Numeric failure ({error_code}): {message}")

    return NumericError(message, error_code=error_code, recovery_hint=recovery_hint)
