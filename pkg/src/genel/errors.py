"""Exception types shared across the package."""


class GenELError(Exception):
    pass


class OverlapError(GenELError, ValueError):
    pass


class UnknownEntityError(GenELError, KeyError):
    def __str__(self) -> str:
        return f"unknown entity: {self.args[0]!r}"


class DelimiterError(GenELError, ValueError):
    pass


class MalformedMarkupError(GenELError, ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class MisalignedSpanError(GenELError, ValueError):
    def __init__(self, start: int, end: int):
        super().__init__(f"character span [{start}, {end}) does not align with token boundaries")
        self.start, self.end = start, end


class DuplicateTitleError(GenELError, ValueError):
    def __init__(self, title: str):
        super().__init__(f"duplicate entity title: {title!r}")
        self.title = title


class EmptyTargetError(GenELError, ValueError):
    pass


class DimMismatchError(GenELError, ValueError):
    pass


class GoldNegativeOverlapError(GenELError, ValueError):
    pass


class InsufficientPoolError(GenELError, ValueError):
    pass


class VocabularyError(GenELError, ValueError):
    pass


class EmptyChoiceError(GenELError, ValueError):
    pass


class InternalStateError(GenELError, RuntimeError):
    pass


class FileFormatError(GenELError, ValueError):
    pass
