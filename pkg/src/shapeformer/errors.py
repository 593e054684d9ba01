"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes, so each class carries one.
"""


class ShapeFormerError(Exception):
    exit_code = 1


class InputError(ShapeFormerError):
    """Unreadable or malformed input (missing file, bad config)."""

    exit_code = 2


class ParseError(InputError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class DataError(InputError):
    """File parsed but its content is inconsistent (e.g. unknown label)."""


class ArtifactMismatch(ShapeFormerError):
    """Digest or version of an artifact does not match what was expected."""

    exit_code = 3


class ContractViolation(ShapeFormerError, ValueError):
    """A precondition or invariant of an operation was broken."""

    exit_code = 4
