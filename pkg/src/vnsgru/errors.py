"""Exception types shared across the package.

Each class maps onto one CLI exit code (see ``vnsgru.cli``).
"""


class VNSGRUError(Exception):
    exit_code = 1


class ConfigurationError(VNSGRUError, ValueError):
    exit_code = 2


class DimensionError(ConfigurationError):
    pass


class DomainError(VNSGRUError, ValueError):
    exit_code = 2


class VocabularyError(VNSGRUError, ValueError):
    exit_code = 3


class FormatError(VNSGRUError):
    """Malformed binary or text artifact. ``offset`` is the byte position, if known."""

    exit_code = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ValidationError(VNSGRUError, ValueError):
    exit_code = 3


class EvaluationError(VNSGRUError, ArithmeticError):
    exit_code = 4


class OptimizerError(VNSGRUError, ArithmeticError):
    exit_code = 4
