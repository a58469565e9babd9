from typing import Optional

from slide_search_tool.constants import ExitCodes


class SlideSearchError(Exception):
    exit_code: int = ExitCodes.DATA


class UsageError(SlideSearchError):
    exit_code: int = ExitCodes.USAGE


class DataError(SlideSearchError):
    exit_code: int = ExitCodes.DATA


class DimensionError(DataError):
    pass


class EmptyIndexError(DataError):
    pass


class FormatError(DataError):
    def __init__(self, message: str, path: Optional[str] = None, offset: Optional[int] = None):
        self.path = path
        self.offset = offset
        location = ""
        if path is not None:
            location += f"{path}"
        if offset is not None:
            location += f"{' ' if location else ''}at offset {offset}"
        self.message = f"{message} ({location})" if location else message
        super().__init__(self.message)


class NumericError(SlideSearchError):
    exit_code: int = ExitCodes.NUMERIC

    def __init__(self, message: str, parameter: Optional[str] = None):
        self.parameter = parameter
        self.message = f"{message} [parameter: {parameter}]" if parameter else message
        super().__init__(self.message)


class DegenerateInputError(NumericError):
    pass


class PreconditionError(NumericError):
    pass
