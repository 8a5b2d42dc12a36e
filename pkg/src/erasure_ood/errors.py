"""File-format errors shared by the IDX, IMGB and checkpoint readers."""


class FormatError(ValueError):
    """Base class for malformed input files."""


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class VersionError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class DimensionError(FormatError):
    """Header dimensions are impossible (overflow, zero-size axes, trailing bytes)."""
