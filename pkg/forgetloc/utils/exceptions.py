"""
Exception hierarchy shared by the engine, the services and the CLI.

Every error raised on purpose by forgetloc derives from `ForgetLocError`, so
callers (CLI, API) can separate expected failures from programming errors.
"""

from pathlib import Path
from typing import Optional, Union


class ForgetLocError(Exception):
    """Base class for all forgetloc errors"""


class DimensionError(ForgetLocError, ValueError):
    """Operand shapes do not fit together"""


class InvalidInputError(ForgetLocError, ValueError):
    """An argument is outside its allowed range"""


class UsageError(ForgetLocError, RuntimeError):
    """An API was called in the wrong state or order"""


class ConsistencyError(ForgetLocError, ValueError):
    """Two related inputs disagree with each other"""


class FormatError(ForgetLocError, ValueError):
    """A binary file does not follow the expected layout"""

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class FetchError(ForgetLocError, OSError):
    """A dataset file could not be downloaded and is not cached"""


class IntegrityError(ForgetLocError):
    """A cached file does not have its declared size"""


class ExportError(ForgetLocError, OSError):
    """Writing an artifact failed"""

    def __init__(self, message: str, path: Union[str, Path]):
        super().__init__(f"{message}: {path}")
        self.path = Path(path)
