"""
Exception hierarchy shared by every sense-forge module.

Each error also derives from the closest builtin so callers that only know
about ValueError / IndexError / OSError keep working.
"""


class SenseError(Exception):
    """Base class for all sense-forge errors."""


class ShapeError(SenseError, ValueError):
    pass


class NumericInputError(SenseError, ValueError):
    pass


class NumericOverflowError(SenseError, ArithmeticError):
    pass


class LabelIndexError(SenseError, IndexError):
    pass


class TapeStateError(SenseError, RuntimeError):
    pass


class SpecError(SenseError, ValueError):
    pass


class ValidityError(SenseError, ValueError):
    pass


class DegenerateModelError(SenseError, ValueError):
    pass


class UnsupportedError(SenseError, NotImplementedError):
    pass


class InputError(SenseError, ValueError):
    pass


class IdxFormatError(SenseError, ValueError):
    pass


class IdxLengthError(SenseError, ValueError):
    pass


class ConfigError(SenseError, ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ArtifactError(SenseError, OSError):
    def __init__(self, path, message: str):
        self.path = str(path)
        super().__init__(f"{path}: {message}")
