"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to (1 validation, 2 data, 3 internal).
"""


class HyperdysError(Exception):
    exit_code = 3


class ValidationError(HyperdysError, ValueError):
    exit_code = 1


class ParameterError(ValidationError):
    """An argument is outside its allowed range."""


class ConfigError(ValidationError):
    pass


class ShapeError(HyperdysError, ValueError):
    pass


class LabelError(ValidationError):
    pass


class StratificationError(ValidationError):
    pass


class StateError(HyperdysError, RuntimeError):
    pass


class NumericError(HyperdysError, ArithmeticError):
    pass


class DataError(HyperdysError):
    exit_code = 2


class FormatError(DataError):
    """A file does not follow its binary layout."""


class UnsupportedError(DataError):
    pass


class EmptyInputError(DataError):
    pass


class TooShortError(DataError):
    pass


class IncompatibleWeightsError(DataError):
    pass


class CorruptionError(FormatError):
    pass


class VersionError(DataError):
    pass
