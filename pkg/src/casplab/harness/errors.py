class FormatError(ValueError):
    """A dataset or checkpoint file failed to parse.

    ``kind`` is one of ``bad_magic``, ``version``, ``truncated``, ``trailing``.
    """

    def __init__(self, message: str, kind: str):
        super().__init__(message)
        self.kind = kind


class BadMagicError(FormatError):
    def __init__(self, message: str):
        super().__init__(message, "bad_magic")


class VersionError(FormatError):
    def __init__(self, message: str):
        super().__init__(message, "version")


class TruncatedError(FormatError):
    def __init__(self, message: str):
        super().__init__(message, "truncated")


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""
