"""Exception hierarchy shared across the package."""


class MusicQaError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(MusicQaError):
    """Malformed input file (bad JSON, missing fields, bad types).

    ``line_no`` is set when the error can be pinned to a line of a
    line-oriented file, otherwise it is None.
    """

    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no
