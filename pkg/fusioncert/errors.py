"""Exception hierarchy shared by the engine, the CLI and the backend."""

from typing import Optional


class FusionCertError(Exception):
    """Base class for every error raised on purpose by fusioncert."""


class InputError(FusionCertError, ValueError):
    """A documented pre-condition was violated by the caller."""


class DomainError(InputError):
    """A math function was evaluated outside its domain (no silent clamping)."""


class SceneFormatError(FusionCertError):
    """A scene file could not be parsed."""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        self.line = line
        self.column = column
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{where}")


class SceneValidationError(InputError):
    """A scene parsed but one of its fields is invalid."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class SamplingError(FusionCertError):
    """The smoothed statistic failed on one noisy sample."""

    def __init__(self, index: int, cause: BaseException, cell: Optional[int] = None):
        self.index = index
        self.cell = cell
        self.cause = cause
        where = f"cell {cell}, " if cell is not None else ""
        super().__init__(f"statistic failed on {where}sample {index}: {cause}")


class DetectorError(FusionCertError):
    """Base class for detector failures."""


class DetectorProtocolError(DetectorError):
    def __init__(self, message: str, payload: str = "", offset: Optional[int] = None):
        self.payload = payload
        self.offset = offset
        excerpt = payload[:120]
        at = f" at byte {offset}" if offset is not None else ""
        super().__init__(f"{message}{at}: {excerpt!r}")


class DetectorTimeoutError(DetectorError):
    pass


class DetectorProcessDied(DetectorError):
    pass
