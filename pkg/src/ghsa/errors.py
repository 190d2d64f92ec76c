"""Exception types raised across the package."""


class GhsaError(Exception):
    """Base class for all package errors."""


class InvalidArgument(GhsaError, ValueError):
    pass


class ShapeError(GhsaError, ValueError):
    pass


class InvalidQuaternion(InvalidArgument):
    pass


class DegenerateConfiguration(GhsaError):
    """Point configuration does not determine a unique transform."""


class CulledBehindCamera(GhsaError):
    """Gaussian lies at or behind the near plane."""


class InvalidAsset(GhsaError):
    pass


class InsufficientAnchors(GhsaError):
    pass


class InvalidState(GhsaError):
    pass


class CorruptAsset(InvalidAsset):
    """Container failed a checksum, version or layout check.

    ``field`` names the offending manifest entry when known.
    """

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{message} [{field}]")
        self.field = field
