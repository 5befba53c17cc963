"""Exception hierarchy.

Three families map onto the CLI exit codes: configuration problems (2),
data problems (3) and numerical failures (4).
"""


class ForeSWEError(Exception):
    exit_code = 1


class ConfigError(ForeSWEError):
    exit_code = 2


class DataError(ForeSWEError):
    exit_code = 3


class NumericalError(ForeSWEError):
    exit_code = 4


class SchemaError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class EmptyDataset(DataError):
    pass


class InsufficientHistory(DataError):
    pass


class TooFewStations(DataError):
    pass


class IncompleteForecasts(DataError):
    pass


class NotPositiveDefinite(NumericalError):
    pass


class DivergenceError(NumericalError):
    pass


class DegenerateActual(NumericalError):
    pass


class ZeroDenominator(NumericalError):
    pass


class NonPositiveVariance(NumericalError):
    pass


class UnknownParameter(ForeSWEError, KeyError):
    pass


class ShapeMismatch(ForeSWEError, ValueError):
    pass


class HorizonOutOfRange(ForeSWEError, IndexError):
    pass
