"""Exception hierarchy shared across the package."""


class MifcError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(MifcError):
    """An argument violates an operation's preconditions."""


class InvalidStateError(MifcError):
    """Operation called in a state it does not support (e.g. double backward)."""


class NumericFailure(MifcError):
    """A non-finite value appeared where finite arithmetic was required."""


class FormatError(MifcError):
    """A file does not conform to its declared binary/text format."""


class DataInvalidError(MifcError):
    """Dataset contents violate a documented contract."""


class DegenerateImageError(DataInvalidError):
    """An image carries no usable signal (e.g. constant, or empty mask)."""
