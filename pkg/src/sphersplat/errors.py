"""Exception types shared across the package."""


class SphersplatError(Exception):
    """Base class for all package errors."""


class OutOfRangeError(SphersplatError):
    """Point falls outside the spherical grid bounds."""


class BehindCameraError(SphersplatError):
    """Point has non-positive depth in the camera frame."""


class DegenerateGeometryError(SphersplatError):
    """Input geometry is rank-deficient (collinear / coincident / empty)."""


class EmptyFrameError(SphersplatError):
    """No pixel in the frame passed the confidence threshold."""


class DimensionMismatchError(SphersplatError):
    """Array shapes are incompatible with the operation."""


class EmptyTargetsError(SphersplatError):
    """Supervision target set is empty."""


class EmptyMaskError(SphersplatError):
    """Validity mask intersection is empty."""


class EmptyCloudError(SphersplatError):
    """Point cloud has no points."""


class NoCorrespondencesError(SphersplatError):
    """No primitive correspondences could be established."""


class BadMagicError(SphersplatError):
    """Binary stream does not start with the expected magic bytes."""


class VersionMismatchError(SphersplatError):
    """Binary stream version is not supported."""


class TruncatedStreamError(SphersplatError):
    """Binary stream ended before all declared records were read."""


class MissingFileError(SphersplatError):
    """A file required by the dataset layout is absent."""


class SizeMismatchError(SphersplatError):
    """File size disagrees with the dimensions declared in meta.json."""


class BadCalibrationError(SphersplatError):
    """Camera calibration is invalid (non-orthonormal or reflected rotation)."""


class BadHeaderError(SphersplatError):
    """PLY header is malformed or inconsistent with the payload."""


class UnsupportedPropertyError(SphersplatError):
    """PLY file declares a property this reader does not understand."""
