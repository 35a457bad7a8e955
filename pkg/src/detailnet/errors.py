"""Exception hierarchy shared across the package."""


class DetailNetError(Exception):
    """Base class for all errors raised by detailnet."""


class ShapeError(DetailNetError, ValueError):
    pass


class ConfigError(DetailNetError, ValueError):
    pass


class DataError(DetailNetError, ValueError):
    pass


class UsageError(DetailNetError, RuntimeError):
    pass


class FormatError(DetailNetError, ValueError):
    """File does not look like the expected format (bad magic, bad header)."""


class VersionError(FormatError):
    pass


class CorruptionError(FormatError):
    """File has the right header but its payload is damaged or truncated."""


class ParseError(DetailNetError, ValueError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)
