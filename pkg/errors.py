#!/usr/bin/env python3
"""
Pipeline error types and common error-reporting patterns
Every error carries the CLI exit code it maps to
"""

from typing import Any, Dict, Optional


class LungSynError(Exception):
    """Base class for all pipeline errors"""
    exit_code = 1
    action_required: Optional[str] = None


class ConfigError(LungSynError):
    """Invalid or missing configuration (bad key, bad value, missing artifact)"""
    exit_code = 2
    action_required = "check_config"


class ContractError(LungSynError, ValueError):
    """A caller broke an operation's precondition (shape mismatch, bad range, misuse)"""
    exit_code = 2
    action_required = "check_inputs"


class DataIntegrityError(LungSynError):
    """On-disk data is inconsistent (size mismatch, leakage, bad annotation)"""
    exit_code = 3
    action_required = "check_data"


class FormatError(DataIntegrityError):
    """A file is missing a required header key or column"""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class SliceSkipped(LungSynError):
    """Per-slice condition that skips work on one slice without stopping a run"""
    exit_code = 3


class EmptyROIError(SliceSkipped):
    """The slice plane lies outside the nodule sphere"""


class DegenerateClusterError(SliceSkipped):
    """Two-means clustering needs at least two distinct intensities"""


class EmptyBodyError(SliceSkipped):
    """Nothing survives the body threshold on this slice"""


class NumericalError(LungSynError):
    """Non-finite values or a failed matrix decomposition"""
    exit_code = 4
    action_required = "inspect_trace"

    def __init__(self, message: str, step: Optional[int] = None,
                 diagnostics: Optional[Dict[str, Any]] = None):
        self.step = step
        self.diagnostics = diagnostics or {}
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)


def exit_code_for(error: BaseException) -> int:
    """Map any exception to the CLI exit code"""
    if isinstance(error, LungSynError):
        return error.exit_code
    return 1


def create_error_response(error: BaseException, stage: Optional[str] = None) -> Dict[str, Any]:
    """
    Create standardized error response

    Args:
        error: The exception that stopped the stage
        stage: Optional pipeline stage name

    Returns:
        Status dict with error type, message, and the action the user should take
    """
    response = {
        "status": type(error).__name__,
        "error": str(error),
        "message": f"{stage} failed: {error}" if stage else str(error),
        "exit_code": exit_code_for(error),
    }

    action_required = getattr(error, "action_required", None)
    if action_required:
        response["action_required"] = action_required

    if isinstance(error, NumericalError):
        response["step"] = error.step
        response["diagnostics"] = error.diagnostics

    return response
