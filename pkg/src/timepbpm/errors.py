"""Exception hierarchy.

``DataError`` subclasses map to CLI exit code 2, ``NumericError``
subclasses to exit code 3.
"""


class PBPMError(Exception):
    """Base class for every error raised by this package."""


class DataError(PBPMError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class SchemaError(DataError):
    pass


class EmptyLogError(DataError):
    pass


class SplitError(DataError):
    pass


class EncodingError(DataError):
    pass


class VocabularyMismatchError(DataError):
    pass


class ShapeError(DataError):
    pass


class CheckpointError(DataError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class NumericError(PBPMError, ArithmeticError):
    pass


class DivergenceError(NumericError):
    def __init__(self, message, epoch=None):
        self.epoch = epoch
        super().__init__(message)
