"""Exception types shared across the package."""


class FaceadvError(Exception):
    """Base class for all package errors."""


class ContractError(FaceadvError, ValueError):
    """An argument violated an operation's contract (bad shape, range, or state)."""


class ImageIOError(FaceadvError):
    """Base class for image reading/writing failures."""


class UnsupportedFormatError(ImageIOError):
    """The file decoded, but is not an 8-bit gray/RGB lossless raster."""


class CorruptImageError(ImageIOError):
    """The file could not be decoded as an image at all."""


class DegenerateGridError(FaceadvError):
    """Every capture-grid point was discarded during simulated cleaning."""
