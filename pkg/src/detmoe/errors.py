"""Exception hierarchy shared by the library and the CLI."""


class DetMoeError(Exception):
    """Base class for all package errors."""


class ConfigError(DetMoeError, ValueError):
    """Invalid configuration (bad parameters, missing expert weights, ...)."""


class FormatError(DetMoeError, ValueError):
    """Malformed input file or stream.

    ``offset`` is a byte offset for binary files and ``line`` a 1-based line
    number for text formats; either may be None.
    """

    def __init__(self, message, *, path=None, offset=None, line=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte {offset}")
        super().__init__(f"{': '.join(where)}: {message}" if where else message)
        self.path = path
        self.offset = offset
        self.line = line


class DecodeError(DetMoeError, ValueError):
    """Raw prediction tensor does not match the anchor configuration."""


class TrainingError(DetMoeError, RuntimeError):
    """Gate training diverged."""
