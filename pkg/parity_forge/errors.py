"""Exception hierarchy. Each class carries the CLI exit code it maps to."""
from typing import Any


class ParityForgeError(Exception):
    exit_code = 1


# -----------------------------
# Config (exit 2)
# -----------------------------
class ConfigError(ParityForgeError):
    exit_code = 2


class ContractError(ConfigError):
    """A caller broke an API contract (protected column used as a feature, etc.)."""


class UsageError(ConfigError):
    pass


# -----------------------------
# Data (exit 3)
# -----------------------------
class DataError(ParityForgeError):
    exit_code = 3


class SchemaError(DataError):
    pass


class ColumnTypeError(DataError):
    def __init__(self, column: str, row: int, value: Any, expected: str):
        self.column, self.row, self.value = column, row, value
        super().__init__(f"column '{column}' row {row}: {value!r} is not {expected}")


class MissingValueError(DataError):
    def __init__(self, column: str, rows: list[int]):
        self.column, self.rows = column, rows
        shown = ", ".join(str(r) for r in rows[:10])
        more = f" (+{len(rows) - 10} more)" if len(rows) > 10 else ""
        super().__init__(f"column '{column}' has missing values at rows {shown}{more}")


class RoleError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class UnknownGroupError(DataError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown group"


class DegenerateDataError(DataError):
    pass


class EmptyEnsembleError(DataError):
    pass


# -----------------------------
# Numeric (exit 4)
# -----------------------------
class NumericError(ParityForgeError):
    exit_code = 4


class ConvergenceError(NumericError):
    def __init__(self, message: str, last_iterate=None, gradient_norm: float | None = None):
        self.last_iterate = last_iterate
        self.gradient_norm = gradient_norm
        super().__init__(message)


class DivergenceError(NumericError):
    pass


class DegenerateFitError(NumericError):
    pass


class ZeroMassError(NumericError):
    def __init__(self, row: int, value: float):
        self.row, self.value = row, value
        super().__init__(f"row {row}: fitted model assigns zero mass to observed value {value!r}")


class PropagationError(NumericError):
    def __init__(self, row: int):
        self.row = row
        super().__init__(f"row {row}: conditional CDF evaluated to NaN")


class DomainError(NumericError, ValueError):
    pass


class UndefinedMetricError(NumericError):
    pass


# -----------------------------
# Chain context
# -----------------------------
class ChainStepError(ParityForgeError):
    """Wraps a failure inside one step of one replicate of a chained transform."""

    def __init__(self, cause: ParityForgeError, variable: str, step: int, replicate: int):
        self.cause, self.variable, self.step, self.replicate = cause, variable, step, replicate
        self.exit_code = getattr(cause, "exit_code", 1)
        super().__init__(f"replicate {replicate}, step {step} ('{variable}'): {cause}")


class ReplicateError(ParityForgeError):
    """Wraps a failure while fitting a predictor to one replicate of an ensemble."""

    def __init__(self, cause: ParityForgeError, replicate: int):
        self.cause, self.replicate = cause, replicate
        self.exit_code = getattr(cause, "exit_code", 1)
        super().__init__(f"replicate {replicate}: {cause}")
