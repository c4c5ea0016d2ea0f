"""Exception hierarchy.

Everything raised on bad input data derives from :class:`DataError` so the
CLI can map it to a single exit code; I/O problems derive from ``OSError``.
"""


class SubnetkitError(Exception):
    pass


class DataError(SubnetkitError):
    """Input data is malformed or inconsistent."""


class MalformedHeader(DataError):
    pass


class OffsetOutOfBounds(DataError):
    pass


class UnknownTensor(DataError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class SchemaMismatch(DataError):
    def __init__(self, message: str, offenders=()):
        self.offenders = list(offenders)
        if self.offenders:
            message = f"{message}: {', '.join(self.offenders)}"
        super().__init__(message)


class MaskSchemaMismatch(SchemaMismatch):
    pass


class LengthMismatch(DataError):
    pass


class MaskFormatError(DataError):
    pass


class EmptyMask(DataError):
    pass


class NotAMatrix(DataError):
    pass


class EmptySequence(DataError):
    pass


class InsufficientCheckpoints(DataError):
    pass


class DimMismatch(DataError):
    pass


class DegeneratePair(DataError):
    pass


class IoFailure(SubnetkitError, OSError):
    pass
