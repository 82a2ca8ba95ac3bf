"""Exception hierarchy."""


class EstimationError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(EstimationError, ValueError):
    pass


class DomainError(EstimationError, ValueError):
    """Input lies outside the domain of the operation (zero vector, n <= p, ...)."""


class ContractError(EstimationError):
    """A documented precondition was violated."""


class InsufficientDataError(DomainError):
    pass


class NumericError(EstimationError, ArithmeticError):
    """Singular matrix, non-finite iterate, or similar numerical breakdown."""

    def __init__(self, message: str, trace=None, report=None):
        super().__init__(message)
        self.trace = trace
        self.report = report


class DivergenceError(NumericError):
    """An iteration left the region where its update is defined."""


class SingularStepError(NumericError):
    pass


class IllConditionedError(NumericError):
    pass


class DegenerateMeanError(DomainError):
    """The mean direction is undefined (zero or orthogonal to the selected span)."""


class InputParseError(EstimationError, ValueError):
    """A data file could not be read as a numeric matrix."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        where = ""
        if line is not None:
            where = f"line {line}" + (f", column {column}" if column is not None else "") + ": "
        super().__init__(where + message)
        self.line = line
        self.column = column
