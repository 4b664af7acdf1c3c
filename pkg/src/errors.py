"""Exception hierarchy shared by all bdo-tool services."""


class BandToolError(Exception):
    """Base class for every error raised by the toolkit."""


class SpaceError(BandToolError):
    """Raised for invalid windows, metric tables or point references."""


class ExpressionError(BandToolError):
    """Raised when a coefficient expression cannot be parsed or evaluated."""

    def __init__(self, message: str, position: int | None = None):
        self.position = position
        where = f" (at column {position + 1})" if position is not None else ""
        super().__init__(f"{message}{where}")


class ExpressionSyntaxError(ExpressionError):
    """Raised for malformed coefficient expressions."""


class ExpressionEvaluationError(ExpressionError):
    """Raised when evaluation fails at a specific point."""

    def __init__(self, message: str, position: int | None = None, point_index: int | None = None):
        self.point_index = point_index
        super().__init__(message, position)


class OperatorError(BandToolError):
    """Raised for space mismatches and malformed operator data."""


class PartitionError(BandToolError):
    """Raised when a partition of unity or an assembly cannot be built."""


class LimitsError(BandToolError):
    """Raised when limit operators cannot be extracted."""


class LowerNormError(BandToolError):
    """Raised for invalid lower-norm requests."""


class UnsupportedComputation(LowerNormError):
    """Raised when no exact method is available and sampling is disabled."""


class ParametrixError(BandToolError):
    """Raised when the parametrix construction cannot proceed."""


class ConfigError(BandToolError):
    """Raised with every schema violation found in an analysis config."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class InvariantViolation(BandToolError):
    """Raised when a checked identity or bound fails."""
