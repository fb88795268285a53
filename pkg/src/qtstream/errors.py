"""Exception hierarchy shared across the package."""


class QtStreamError(Exception):
    """Base class for all qtstream errors."""


class InvalidTrainingError(QtStreamError):
    """Training set cannot support the requested partition (e.g. N < K)."""


class DegenerateCutError(QtStreamError):
    """A cut would land on tied coordinate values along a dimension."""

    def __init__(self, dim: int, message: str | None = None):
        self.dim = dim
        super().__init__(message or f"degenerate cut: tied coordinates along dimension {dim}")


class DimensionMismatchError(QtStreamError):
    """Input vector dimension does not match the fitted partition."""


class CalibrationMismatchError(QtStreamError):
    """Threshold table metadata does not match the detector configuration."""


class MonitoringHaltedError(QtStreamError):
    """A detector was stepped after it already reported a detection."""


class MemoryBudgetError(QtStreamError):
    """Materializing all simulated paths would exceed the memory budget."""


class FitError(QtStreamError):
    """Threshold polynomial fit is infeasible (bad degree or too few points)."""


class CsvParseError(QtStreamError):
    """Non-numeric or malformed cell in an ingested CSV."""

    def __init__(self, row: int, col: int, message: str | None = None):
        self.row = row
        self.col = col
        super().__init__(message or f"non-numeric value at row {row}, column {col}")


class ZeroVarianceError(QtStreamError):
    """A column cannot be standardized because its variance is zero."""


class StreamExhaustedError(QtStreamError):
    """A CSV-backed stream ran out of rows before reaching the requested length."""
