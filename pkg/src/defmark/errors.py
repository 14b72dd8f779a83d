"""Exception hierarchy. The CLI maps these onto exit codes (2 = bad input,
3 = numerical failure)."""


class DefmarkError(Exception):
    """Base class for all errors raised by this package."""


class InputError(DefmarkError):
    """Invalid arguments, paths, parameters or file contents."""


class FileFormatError(InputError):
    """A file could not be parsed; carries the path and 1-based line number."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        self.reason = message
        location = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{location}: {message}")


class DegenerateGeometryError(DefmarkError):
    """Geometry too degenerate to solve (collinear/coplanar clouds, rank loss)."""


class NumericalError(DefmarkError):
    """An optimization produced non-finite or otherwise unusable values."""
