"""Exception hierarchy shared by all bnnx modules."""


class BnnxError(Exception):
    """Base class for every error raised deliberately by bnnx."""


class ShapeError(BnnxError, ValueError):
    """Operand shapes or geometries do not conform."""


class StateError(BnnxError, RuntimeError):
    """An operation was called in the wrong state (e.g. backward before forward)."""


class FormatError(BnnxError, ValueError):
    """Malformed serialized input."""


class TruncatedError(FormatError):
    pass


class BadMagicError(FormatError):
    pass


class UnknownKindError(FormatError):
    pass


class VersionError(FormatError):
    pass


class UnsupportedTypeError(FormatError):
    pass


class HeaderError(FormatError):
    pass


class ManifestError(FormatError):
    pass


class FingerprintMismatchError(BnnxError, ValueError):
    """A cache or bundle refers to a different extractor than the one supplied."""


class ArchError(BnnxError, ValueError):
    """Unparseable architecture string."""


class NumericError(BnnxError, ArithmeticError):
    """Training diverged (non-finite loss)."""
