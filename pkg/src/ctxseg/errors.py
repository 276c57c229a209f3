"""Exception hierarchy. CLI exit codes key off these classes."""


class CtxSegError(Exception):
    pass


class DataError(CtxSegError):
    """Unreadable, missing or malformed input data."""


class ConfigError(CtxSegError, ValueError):
    pass


class DimensionError(CtxSegError, ValueError):
    pass


class VariantMismatchError(CtxSegError, ValueError):
    pass


class DuplicateIdError(CtxSegError, KeyError):
    pass


class NotTrainedError(CtxSegError, RuntimeError):
    pass


class ExtractorUnavailableError(CtxSegError, RuntimeError):
    pass


class MemoryFileError(CtxSegError):
    """Base class for memory-file decoding failures."""


class MemoryFormatError(MemoryFileError):
    pass


class MemoryVersionError(MemoryFileError):
    pass


class MemoryTruncatedError(MemoryFileError):
    pass


class MemoryChecksumError(MemoryFileError):
    pass


class BundleError(CtxSegError):
    pass


class StageError(CtxSegError):
    """A benchmark stage failed; ``stage`` names it and ``__cause__`` holds the original error."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
