"""Custom exception classes for the GINA pipeline."""

from typing import Any, Dict, Optional


class GinaError(Exception):
    """Base exception for all pipeline errors."""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        """
        Initialize the exception.

        Args:
            message: Error message
            details: Additional error details
        """
        super().__init__(message)
        self.message = message
        self.details = details or {}


class ValidationError(GinaError):
    """Exception raised for invalid inputs to an operation."""

    def __init__(self, message: str, field: Optional[str] = None, value: Any = None):
        """
        Initialize validation error.

        Args:
            message: Error message
            field: Field or argument that failed validation
            value: Invalid value
        """
        details = {}
        if field:
            details["field"] = field
        if value is not None:
            details["value"] = str(value)

        super().__init__(message, details)
        self.field = field
        self.value = value


class ConfigurationError(GinaError):
    """Exception raised for configuration errors."""

    def __init__(self, message: str, config_key: Optional[str] = None):
        """
        Initialize configuration error.

        Args:
            message: Error message
            config_key: Configuration key that is invalid
        """
        details = {}
        if config_key:
            details["config_key"] = config_key

        super().__init__(message, details)
        self.config_key = config_key


class DatasetError(GinaError):
    """Exception raised when a dataset directory cannot be read or written."""

    def __init__(
        self,
        message: str,
        sample_id: Optional[str] = None,
        path: Optional[str] = None,
    ):
        details = {}
        if sample_id:
            details["sample_id"] = sample_id
        if path:
            details["path"] = path

        super().__init__(message, details)
        self.sample_id = sample_id
        self.path = path


class CheckpointError(GinaError):
    """Exception raised for unreadable or incompatible checkpoint files."""

    def __init__(
        self,
        message: str,
        path: Optional[str] = None,
        expected_version: Optional[int] = None,
        found_version: Optional[int] = None,
    ):
        """
        Initialize checkpoint error.

        Args:
            message: Error message
            path: Checkpoint file path
            expected_version: Format version this build reads
            found_version: Format version stored in the file
        """
        details: Dict[str, Any] = {}
        if path:
            details["path"] = path
        if expected_version is not None:
            details["expected_version"] = expected_version
        if found_version is not None:
            details["found_version"] = found_version

        super().__init__(message, details)
        self.path = path
        self.expected_version = expected_version
        self.found_version = found_version


class RenderError(GinaError):
    """Exception raised when rays or cameras cannot be rendered."""

    def __init__(self, message: str, ray_index: Optional[int] = None):
        details = {}
        if ray_index is not None:
            details["ray_index"] = ray_index

        super().__init__(message, details)
        self.ray_index = ray_index


class TrainingError(GinaError):
    """Exception raised when an optimization step has to be aborted."""

    def __init__(
        self,
        message: str,
        step: Optional[int] = None,
        report: Optional[Dict[str, Any]] = None,
    ):
        """
        Initialize training error.

        Args:
            message: Error message
            step: Optimizer step at which training failed
            report: Loss terms computed before the failure
        """
        details: Dict[str, Any] = {}
        if step is not None:
            details["step"] = step
        if report:
            details["report"] = report

        super().__init__(message, details)
        self.step = step
        self.report = report


class SamplingError(GinaError):
    """Exception raised when token sampling produces invalid predictions."""

    def __init__(self, message: str, step: Optional[int] = None):
        details = {}
        if step is not None:
            details["step"] = step

        super().__init__(message, details)
        self.step = step


class ExportError(GinaError):
    """Exception raised for asset export and import failures."""

    def __init__(self, message: str, format: Optional[str] = None):
        details = {}
        if format:
            details["format"] = format

        super().__init__(message, details)
        self.format = format


class MetricsError(GinaError):
    """Exception raised when an evaluation metric cannot be computed."""

    def __init__(self, message: str, metric: Optional[str] = None):
        details = {}
        if metric:
            details["metric"] = metric

        super().__init__(message, details)
        self.metric = metric


class UsageError(GinaError):
    """Exception raised for malformed command-line invocations."""


# Error code mappings for CLI error reports
ERROR_CODES = {
    ValidationError: "VALIDATION_ERROR",
    ConfigurationError: "CONFIGURATION_ERROR",
    DatasetError: "DATASET_ERROR",
    CheckpointError: "CHECKPOINT_ERROR",
    RenderError: "RENDER_ERROR",
    TrainingError: "TRAINING_ERROR",
    SamplingError: "SAMPLING_ERROR",
    ExportError: "EXPORT_ERROR",
    MetricsError: "METRICS_ERROR",
    UsageError: "USAGE_ERROR",
    GinaError: "GENERAL_ERROR",
}

# Process exit codes
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2


def get_error_code(exception: Exception) -> str:
    """
    Get error code for an exception.

    Args:
        exception: Exception instance

    Returns:
        Error code string
    """
    for exc_type, code in ERROR_CODES.items():
        if isinstance(exception, exc_type):
            return code

    return "UNKNOWN_ERROR"


def get_exit_code(exception: Exception) -> int:
    """
    Map an exception to the process exit code.

    Args:
        exception: Exception instance

    Returns:
        1 for usage errors, 2 for every runtime failure
    """
    if isinstance(exception, UsageError):
        return EXIT_USAGE
    return EXIT_FAILURE


def format_error_response(exception: Exception) -> Dict[str, Any]:
    """
    Format an exception into a standardized error report.

    Args:
        exception: Exception to format

    Returns:
        Formatted error report dictionary
    """
    if isinstance(exception, GinaError):
        return {
            "error": {
                "code": get_error_code(exception),
                "message": exception.message,
                "details": exception.details,
            }
        }
    else:
        return {
            "error": {
                "code": "UNKNOWN_ERROR",
                "message": str(exception),
                "details": {},
            }
        }
