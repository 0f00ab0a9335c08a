"""Shared exception types.

The CLI maps these onto exit codes: validation-style errors exit 1,
I/O and file-format corruption exit 2.
"""


class ValidationError(ValueError):
    """Input violates a documented precondition or invariant."""


class ParseError(ValueError):
    """Malformed input document; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class FormatError(ValueError):
    """Input is well-formed but not in any recognized layout."""


class SchemaError(ValueError):
    """A serialized record is missing fields or has wrong types; names the line."""

    def __init__(self, message: str, line_number: int | None = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class CapacityError(ValueError):
    """A size budget is too small to satisfy mandatory contents."""


class CorruptCheckpointError(IOError):
    """Checkpoint file has a bad magic, truncated data, or an unreadable header."""


class NonFiniteGradientError(FloatingPointError):
    """Training produced a NaN/inf gradient; names the offending tensor."""

    def __init__(self, tensor_name: str):
        super().__init__(f"non-finite gradient in tensor '{tensor_name}'")
        self.tensor_name = tensor_name
