from typing import Any


class LossprobeError(Exception):
    """
    Base class of every error raised by the library
    """

    def __init__(self, message: str) -> None:
        super().__init__(message)
        self.reason = message

    def __str__(self) -> str:
        return f"{self.__class__.__name__}: {self.reason}"


class DomainError(LossprobeError):
    """A probability or parameter is outside its domain."""


class RangeError(LossprobeError):
    """A loss formula produced a value outside [0, 1]."""


class ConfigError(LossprobeError):
    """Invalid configuration: unknown family, bad fractions, bad alpha."""


class DataError(LossprobeError):
    """The data cannot be used: empty, non-finite or degenerate."""


class ArityError(LossprobeError):
    """An example does not have the number of features the model expects."""


class UnsupportedRepresentation(LossprobeError):
    """The predictor family exposes no internal representation."""


class EmptySubgroup(LossprobeError):
    """A subgroup mask selects zero rows."""


class SchemaError(LossprobeError):
    """A CSV file does not carry the columns its schema names."""


class LabelError(LossprobeError):
    """A label column holds something other than 0/1."""


class ParseError(LossprobeError):
    """
    A CSV cell could not be parsed
    """

    def __init__(self, row: int, column: str, message: str) -> None:
        super().__init__(f"row {row}, column '{column}': {message}")
        self.row = row
        self.column = column


class SandwichViolation(LossprobeError):
    """
    A multicalibration/advantage inequality failed beyond tolerance.
    This means an implementation bug, never a property of the data
    """

    def __init__(self, message: str, report: Any) -> None:
        super().__init__(message)
        self.report = report


class IterationCap(LossprobeError):
    """
    Boosting ran past its round bound; the trace is kept for diagnosis
    """

    def __init__(self, message: str, trace: Any) -> None:
        super().__init__(message)
        self.trace = trace


class BasisViolation(LossprobeError):
    """
    A basis fit missed its error or coefficient-norm guarantee
    """

    def __init__(self, message: str, fit: Any) -> None:
        super().__init__(message)
        self.fit = fit
