"""Exception hierarchy shared by every module of the package."""


class FavaeError(Exception):
    """Base class for all package errors."""


class StructuralError(FavaeError, ValueError):
    """Shapes, names or configuration do not fit together."""


class NumericalError(FavaeError, ArithmeticError):
    """A computation produced a non-finite or otherwise impossible value."""


class FormatError(FavaeError):
    """An on-disk file could not be parsed or failed validation."""


class ChecksumError(FormatError):
    """A stored checksum does not match the file contents."""


class VersionError(FormatError):
    """A file was written with an incompatible format version."""


class TrainingError(FavaeError):
    """Training aborted; the message carries the outer iteration and view."""

    def __init__(self, message, iteration=None, view=None):
        super().__init__(message)
        self.iteration = iteration
        self.view = view


class DimensionError(FormatError):
    """A matrix file does not have the declared dimensions."""


class UnknownKindError(FormatError):
    """A manifest names a view kind that does not exist."""


class HashMismatchError(FormatError):
    """Data content does not match the recorded content hash."""


class MaskError(FormatError):
    """A mask file holds values other than 0 and 1."""
