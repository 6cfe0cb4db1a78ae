"""Exception hierarchy.

Each class carries a ``category`` used by the CLI to map failures onto
exit codes (config -> 2, data -> 3, runtime -> 4).
"""


class PointGptError(Exception):
    category = "runtime"


class ConfigError(PointGptError, ValueError):
    category = "config"


class DataError(PointGptError, ValueError):
    category = "data"


class TooFewPoints(DataError):
    pass


class InvalidCount(DataError):
    pass


class EmptySet(DataError):
    pass


class DegenerateCloud(UserWarning):
    """Warning: all points coincide, so normalization maps them to the origin."""


class ShapeMismatch(PointGptError, ValueError):
    pass


class DimensionMismatch(ShapeMismatch):
    pass


class BadDimension(ConfigError):
    pass


class BadRatio(ConfigError):
    pass


class BadLabel(DataError):
    pass


class LengthMismatch(DataError):
    pass


class EmptyBank(DataError):
    pass


class NonScalarLoss(PointGptError):
    pass


class DoubleBackward(PointGptError):
    pass


class StepOutOfRange(PointGptError, ValueError):
    pass


class TooFewPatches(DataError):
    pass


class MissingFile(DataError):
    pass


class BadGrade(DataError):
    pass


class EmptyClass(DataError):
    pass


class ClassMismatch(DataError):
    pass


class FormatError(DataError):
    pass
