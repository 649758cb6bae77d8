"""Exception types raised across the package."""


class WarpVPRError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(WarpVPRError, ValueError):
    pass


class NotScalar(WarpVPRError, ValueError):
    pass


class GraphConsumed(WarpVPRError, RuntimeError):
    pass


class MissingGrad(WarpVPRError, RuntimeError):
    pass


class SingularSystem(WarpVPRError, ValueError):
    pass


class PointAtInfinity(WarpVPRError, ValueError):
    pass


class DegenerateQuad(WarpVPRError, ValueError):
    pass


class DegenerateIntersection(WarpVPRError, ValueError):
    pass


class InvalidK(WarpVPRError, ValueError):
    pass


class ImageTooSmall(WarpVPRError, ValueError):
    pass


class NoPositives(WarpVPRError, RuntimeError):
    pass


class EmptyCorpus(WarpVPRError, ValueError):
    pass


class EmptyIndex(WarpVPRError, ValueError):
    pass


class UnreadableImage(WarpVPRError, OSError):
    def __init__(self, path, reason=""):
        super().__init__(f"cannot read image {path}: {reason}" if reason else f"cannot read image {path}")
        self.path = path


class MixedCoordinateKinds(WarpVPRError, ValueError):
    pass


class InsufficientResults(WarpVPRError, ValueError):
    pass


class ParseError(WarpVPRError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class MissingFile(WarpVPRError, FileNotFoundError):
    pass


class CheckpointError(WarpVPRError, ValueError):
    pass


class BadMagic(CheckpointError):
    pass


class VersionUnsupported(CheckpointError):
    pass


class CorruptOffsets(CheckpointError):
    pass


class TensorNameCollision(CheckpointError):
    pass


class WriteError(WarpVPRError, OSError):
    pass
