"""Error hierarchy shared by the services and the CLI.

Every error carries the process exit code the CLI reports for it:
2 for usage/config/parse problems, 3 for infeasible or degenerate input,
4 for numerical failures.
"""

from typing import Any, Dict, Optional

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INFEASIBLE = 3
EXIT_NUMERICAL = 4


class TsbError(Exception):
    exit_code: int = EXIT_NUMERICAL

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}


class UsageError(TsbError):
    exit_code = EXIT_USAGE


class ConfigError(TsbError):
    exit_code = EXIT_USAGE


class CaseParseError(TsbError):
    """Case document does not follow the JSON schema; names the offending field."""

    exit_code = EXIT_USAGE

    def __init__(self, message: str, field: str = "", details: Optional[Dict[str, Any]] = None):
        super().__init__(message, details)
        self.field = field


class CaseValidationError(TsbError):
    exit_code = EXIT_USAGE


class ContractError(TsbError):
    """An operation was called outside its precondition."""

    exit_code = EXIT_USAGE


class TopologyError(TsbError):
    exit_code = EXIT_INFEASIBLE


class DegenerateInitError(TsbError):
    exit_code = EXIT_INFEASIBLE


class InfeasibleOperatingPointError(TsbError):
    exit_code = EXIT_INFEASIBLE


class SeedingError(TsbError):
    exit_code = EXIT_INFEASIBLE


class NoBoundaryError(TsbError):
    exit_code = EXIT_INFEASIBLE


class FitError(TsbError):
    exit_code = EXIT_INFEASIBLE


class ReductionError(TsbError):
    exit_code = EXIT_NUMERICAL


class StationaryPointError(TsbError):
    exit_code = EXIT_NUMERICAL


class BisectionError(TsbError):
    exit_code = EXIT_NUMERICAL


class NumericalError(TsbError):
    exit_code = EXIT_NUMERICAL
