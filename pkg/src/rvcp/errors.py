"""Exception hierarchy.

``InputError`` subclasses describe malformed inputs (CLI exit code 2);
``StatisticalError`` subclasses describe statistical preconditions that the
data fail to meet (CLI exit code 3).
"""


class RVCPError(Exception):
    exit_code = 1


class InputError(RVCPError, ValueError):
    exit_code = 2


class StatisticalError(RVCPError):
    exit_code = 3


class InvalidTensor(InputError):
    pass


class ParseError(InputError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class HeaderMismatch(InputError):
    pass


class ShapeMismatch(InputError):
    pass


class MissingLabels(InputError):
    pass


class MissingSample(InputError):
    pass


class DomainError(InputError):
    pass


class InsufficientCalibration(StatisticalError):
    pass


class AllZeroVariance(StatisticalError):
    pass


class DegenerateG(StatisticalError):
    pass


class EmptyPopulation(StatisticalError):
    pass
