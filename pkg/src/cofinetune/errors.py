"""Exception hierarchy shared by every module."""


class CofinetuneError(Exception):
    pass


class DataFormatError(CofinetuneError, ValueError):
    """Malformed input file or structure. Carries the offending row when known."""

    def __init__(self, message, row=None, path=None):
        self.row = row
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if row is not None:
            where.append(f"row {row}")
        prefix = (":".join(where) + ": ") if where else ""
        super().__init__(prefix + message)


class ConfigError(CofinetuneError, ValueError):
    """Invalid experiment or component configuration; ``field`` is a dotted path."""

    def __init__(self, message, field=None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class NumericalError(CofinetuneError, FloatingPointError):
    pass
