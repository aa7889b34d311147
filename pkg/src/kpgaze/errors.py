"""Exception hierarchy.

Every error raised on purpose by the library derives from :class:`GazeError`
so callers (and the CLI) can separate domain failures from bugs.
"""

from __future__ import annotations


class GazeError(Exception):
    """Base class for all library errors."""


class ValidationError(GazeError, ValueError):
    """Bad user input: config values, dataset records, CLI arguments."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class TooFewKeypoints(GazeError):
    pass


class DegenerateGeometry(GazeError):
    pass


class ZeroLengthGaze(GazeError):
    pass


class DegenerateMean(GazeError):
    pass


class DegenerateVector(GazeError):
    pass


class DegeneratePrediction(GazeError):
    pass


class DegenerateLabel(GazeError):
    pass


class MissingNose(GazeError):
    pass


class MissingEyes(GazeError):
    pass


class CorruptModel(GazeError):
    pass


class ArchMismatch(GazeError):
    pass


class EmptyDataset(GazeError):
    pass


class NonFiniteLoss(GazeError):
    """Training produced a NaN/inf loss.

    ``dump`` carries the offending batch so it can be written to disk.
    """

    def __init__(self, message: str, dump: dict | None = None):
        self.dump = dump or {}
        super().__init__(message)
