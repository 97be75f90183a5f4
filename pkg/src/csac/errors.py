"""Exception types carrying machine-readable error codes."""


class CSACError(Exception):
    """Base error. ``code`` is a stable identifier surfaced by the CLI."""

    code = "E_CSAC"

    def __init__(self, message, code=None):
        super().__init__(message)
        if code is not None:
            self.code = code

    def __str__(self):
        return f"[{self.code}] {super().__str__()}"


class DataError(CSACError):
    code = "E_DATA"


class SchemaError(CSACError):
    code = "E_SCHEMA"


class ConfigError(CSACError):
    code = "E_CONFIG"


class ShapeError(CSACError):
    code = "E_SHAPE"
