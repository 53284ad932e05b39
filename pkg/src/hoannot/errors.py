"""Exception hierarchy.

Numeric failures map to CLI exit code 1, input/schema failures to exit code 2.
"""


class AnnotationError(Exception):
    exit_code = 1


class NumericError(AnnotationError):
    exit_code = 1


class InputError(AnnotationError):
    exit_code = 2


# geometry
class NonPositiveDepth(NumericError):
    pass


class DegenerateBaseline(NumericError):
    pass


class NearParallelRays(NumericError):
    pass


class RankDeficient(NumericError):
    pass


class EmptyIndex(NumericError):
    pass


class OpenMesh(NumericError):
    pass


# calibration
class InsufficientObservations(NumericError):
    pass


class DegenerateConfiguration(NumericError):
    pass


# keypoint fusion
class TooFewViews(NumericError):
    pass


class NoConsensus(NumericError):
    pass


# object registration / tracking
class NoActiveMarkers(NumericError):
    pass


class TooFewMarkers(NumericError):
    pass


class HighResidual(NumericError):
    """Raised when a per-frame pose fit has a large RMS residual.

    The fitted pose and residual are attached so callers may still use them.
    """

    def __init__(self, message, pose=None, rms=None):
        super().__init__(message)
        self.pose = pose
        self.rms = rms


# fitting / metrics
class WindowTooShort(NumericError):
    pass


class NonFiniteLoss(NumericError):
    pass


class ShapeMismatch(NumericError):
    pass


class EmptyInput(NumericError):
    pass


class DegenerateCovariance(NumericError):
    pass


class InvalidSpec(InputError):
    pass


# model / file I/O
class ParseError(InputError):
    pass


class InvariantViolation(InputError):
    pass


class MissingInput(InputError):
    pass


class SchemaError(InputError):
    pass
