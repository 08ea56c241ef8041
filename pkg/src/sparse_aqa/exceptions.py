from typing import Any, Optional


class AqaError(Exception):
    """Base class of every error raised by `sparse_aqa`.

    `exit_code` is the process status the command line returns when the error
    reaches it.
    """

    exit_code: int = 1


class ConfigurationError(AqaError, ValueError):
    pass


class DimensionError(AqaError, ValueError):
    pass


class ContractError(AqaError, ValueError):
    pass


class DegenerateSequenceError(AqaError, ValueError):
    pass


class ParseError(AqaError, ValueError):
    """A pose record is not valid JSON.

    Args:
        message: description from the JSON decoder.
        offset: byte offset of the failure in the encoded record.
    """

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (byte offset {offset})")
        self.reason = message
        self.offset = offset


class SchemaError(AqaError, ValueError):
    pass


class NoSkeletonError(AqaError, ValueError):
    pass


class EmptySequenceError(AqaError, ValueError):
    """Every frame of a sequence was discarded.

    The `report` attribute holds the `FilterReport` that led to the decision.
    """

    def __init__(self, message: str, report: Optional[Any] = None) -> None:
        super().__init__(message)
        self.report = report


class UnrepairableFrameError(AqaError, ValueError):
    pass


class DegeneratePoseError(AqaError, ValueError):
    pass


class CheckpointError(AqaError, ValueError):
    pass


class FormatError(AqaError, OSError):
    exit_code = 2


class NumericError(AqaError, ArithmeticError):
    exit_code = 3


class UndefinedCorrelationError(AqaError, ArithmeticError):
    exit_code = 3


class GradcheckFailure(AqaError, AssertionError):
    exit_code = 4
