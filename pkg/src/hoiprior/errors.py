"""Exception types raised across the package.

Every error carries a stable ``code`` so the command line can print a
one-line machine-parsable failure.
"""


class HoiError(Exception):
    code = "HoiError"


class InvalidShape(HoiError, ValueError):
    code = "InvalidShape"


class EmptyMesh(HoiError, ValueError):
    code = "EmptyMesh"


class BadResolution(HoiError, ValueError):
    code = "BadResolution"


class ShapeMismatch(HoiError, ValueError):
    code = "ShapeMismatch"


class UnknownCondition(HoiError, KeyError):
    code = "UnknownCondition"

    def __str__(self):
        return Exception.__str__(self)


class EmptyDataset(HoiError, ValueError):
    code = "EmptyDataset"


class NonFiniteObjective(HoiError, FloatingPointError):
    code = "NonFiniteObjective"


class DivergedOptimization(HoiError, FloatingPointError):
    code = "DivergedOptimization"


class FrameOutOfRange(HoiError, IndexError):
    code = "FrameOutOfRange"


class EmptySurface(HoiError, ValueError):
    code = "EmptySurface"


class GenerationFailed(HoiError, RuntimeError):
    code = "GenerationFailed"


class IoFailure(HoiError, OSError):
    code = "IoFailure"


class ConfigError(HoiError, ValueError):
    code = "ConfigError"
