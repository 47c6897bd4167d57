"""Exception hierarchy shared by every stage of the calibration pipeline."""


class CalibrationError(Exception):
    """Base class for all library errors."""

    #: process exit code used by the command line front end
    exit_code = 1


class BehindCamera(CalibrationError):
    pass


class EmptyCloud(CalibrationError):
    pass


class DegenerateCluster(CalibrationError):
    pass


class ZeroMatrix(CalibrationError):
    pass


class ConstantVector(CalibrationError):
    pass


class DegenerateConfiguration(CalibrationError):
    pass


class DivergedRefinement(CalibrationError):
    pass


class TooFewInliers(CalibrationError):
    exit_code = 6


class OutOfFov(CalibrationError):
    pass


class NoDetections(CalibrationError):
    exit_code = 3


class AllZeroScores(CalibrationError):
    exit_code = 4


class Diverged(CalibrationError):
    exit_code = 5


class IoFailure(CalibrationError):
    exit_code = 7


class ParseError(IoFailure):
    """Malformed binary or text payload; ``offset`` is a byte offset or line number."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at {offset})"
        super().__init__(message)
        self.offset = offset


class SchemaError(IoFailure):
    """Structured document failed validation; ``field`` names the offending entry."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
