"""Exception hierarchy shared across the package."""


class SampleRankError(Exception):
    """Base class for every error raised by samplerank."""


class DataError(SampleRankError):
    """Problem with an input dataset file.

    ``line`` is the 1-based line number in the source file when known.
    """

    def __init__(self, message, line=None, session_id=None):
        self.line = line
        self.session_id = session_id
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ParseError(DataError):
    pass


class SchemaMismatchError(DataError):
    pass


class IntegrityError(DataError):
    pass


class SplitError(SampleRankError):
    pass


class ConfigError(SampleRankError, ValueError):
    pass


class SingularCovarianceError(SampleRankError):
    def __init__(self, message, dims=None):
        self.dims = dims
        super().__init__(message)


class EmptyComponentError(SampleRankError):
    pass


class EmptySampleError(SampleRankError):
    pass


class ModelFormatError(SampleRankError):
    """Serialized model could not be read."""


class CorruptModelError(ModelFormatError):
    pass


class VersionMismatchError(ModelFormatError):
    pass


class StageError(SampleRankError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
