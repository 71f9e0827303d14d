"""Exception and warning types shared across the package.

Every error carries an ``exit_code`` used by the command line interface.
"""


class RSMError(Exception):
    exit_code = 1


class ConfigError(RSMError, ValueError):
    exit_code = 2


class DataError(RSMError, ValueError):
    exit_code = 3


class SchemaError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class ValidationError(DataError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class UnimputableFeatureError(DataError):
    pass


class SplitError(DataError):
    pass


class BinningError(DataError):
    pass


class ShapeError(DataError):
    pass


class QueryError(DataError):
    pass


class ArtifactError(DataError):
    """Artifact file is missing, truncated, or fails its checksum."""


class DivergenceError(RSMError, ArithmeticError):
    exit_code = 4


class StaleArtifactError(RSMError):
    exit_code = 5


class StageError(RSMError):
    """A pipeline stage failed; wraps the original error."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        default = 3 if isinstance(cause, (ValueError, OSError, KeyError)) else 1
        self.exit_code = getattr(cause, "exit_code", default)


class DataQualityWarning(UserWarning):
    pass


class DegenerateSelectionWarning(UserWarning):
    pass


class FlatCurveWarning(UserWarning):
    pass


class ShortClusterWarning(UserWarning):
    pass
