"""Exception types raised across the package."""


class LstError(Exception):
    """Base class for all package errors."""


class BadMagic(LstError):
    pass


class Truncated(LstError):
    pass


class BadLabel(LstError):
    pass


class EmptyDataset(LstError):
    pass


class ShapeMismatch(LstError, ValueError):
    pass


class SpecInvalid(LstError, ValueError):
    pass


class FormatVersionMismatch(LstError):
    pass


class ChecksumMismatch(LstError):
    pass


class UnsupportedSpec(LstError):
    pass
