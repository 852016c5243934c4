"""Exception taxonomy shared by all modules.

Every error carries a short machine-parsable code; the CLI prints the code
on its own line before the human-readable message and exits nonzero.
"""


class FglError(Exception):
    """Base class for all package errors."""

    code = "E_GENERIC"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class ParseError(FglError):
    """Malformed input file (names file and line where possible)."""

    code = "E_PARSE"


class FormatError(FglError):
    """Structurally valid file with inconsistent content (mixed schemas)."""

    code = "E_FORMAT"


class ShapeError(FglError):
    """Dimension mismatch between arrays that must align."""

    code = "E_SHAPE"


class BoundsError(FglError):
    """Index outside the valid range."""

    code = "E_BOUNDS"


class ConfigError(FglError):
    """Invalid configuration value or unknown key."""

    code = "E_CONFIG"


class InfeasiblePartitionError(FglError):
    """A partition strategy cannot satisfy its constraints."""

    code = "E_INFEASIBLE"


class ContractViolationError(FglError):
    """An internal pre/postcondition between actors was broken."""

    code = "E_CONTRACT"


class NumericError(FglError):
    """Non-finite value where a finite one is required."""

    code = "E_NUMERIC"


class EvaluationError(FglError):
    """Metric requested on an empty or invalid selection."""

    code = "E_EVAL"


class AggregationError(FglError):
    """Server-side aggregation received unusable messages."""

    code = "E_AGGREGATE"


class PrivacyContractError(FglError):
    """A differential-privacy precondition was violated."""

    code = "E_PRIVACY"


class InfeasibleBudgetError(FglError):
    """No noise scale can meet the requested privacy budget."""

    code = "E_DP_BUDGET"


class ComparisonError(FglError):
    """Reports cannot be compared (mismatched metrics)."""

    code = "E_COMPARE"
