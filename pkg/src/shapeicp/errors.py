"""Exception hierarchy shared by all modules."""


class ShapeICPError(Exception):
    """Base class for every error raised by this package."""


class DataError(ShapeICPError, ValueError):
    """Malformed or insufficient input data (CLI exit code 2)."""


class DegenerateConfiguration(DataError):
    pass


class EmptyReference(DataError):
    pass


class EmptyCloud(DataError):
    pass


class EmptyMesh(DataError):
    pass


class NoInteriorEdges(DataError):
    pass


class IsolatedVertex(DataError):
    pass


class NonFiniteLoss(ShapeICPError, FloatingPointError):
    pass


class TopologyMismatch(DataError):
    pass


class KTooLarge(DataError):
    pass


class LengthMismatch(DataError):
    pass


class NoStoredCodes(DataError):
    pass


class EmptyInputs(DataError):
    pass


class EmptyMeasurements(DataError):
    pass


class EmptyMask(DataError):
    pass


class NonFinite(DataError):
    pass


class AllBehindCamera(DataError):
    pass


class TooFewPoints(DataError):
    pass


class ObjectOutOfFrame(DataError):
    pass


class DegenerateBox(DataError):
    pass


class FormatError(DataError):
    pass


class AllHypothesesDead(ShapeICPError, RuntimeError):
    """Every hypothesis was dropped; ``diagnostics`` holds per-stage notes."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = list(diagnostics or [])
