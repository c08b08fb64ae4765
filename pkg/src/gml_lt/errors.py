"""Exception types shared across the package."""


class InvalidStateError(RuntimeError):
    """An object is in the wrong state for the requested operation
    (missing head, wrong checkpoint stage)."""


class FileFormatError(ValueError):
    """Base class for binary/CSV file parse failures."""


class MalformedHeaderError(FileFormatError):
    pass


class TruncatedPayloadError(FileFormatError):
    pass


class DimensionMismatchError(FileFormatError):
    pass


class VersionError(FileFormatError):
    """File was written by an unsupported (newer) format version."""


class CorruptFileError(FileFormatError):
    """Payload checksum does not match."""
