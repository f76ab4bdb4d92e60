"""Exception hierarchy shared across the package.

ValidationError maps to CLI exit code 2, NumericError to exit code 3.
"""


class PhaseRecError(Exception):
    pass


class ValidationError(PhaseRecError):
    pass


class ShapeError(ValidationError):
    pass


class AnnotationError(ValidationError):
    """Invalid annotation data; carries the offending row when known."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"{message} (row {row})"
        super().__init__(message)
        self.row = row


class NumericError(PhaseRecError):
    pass
