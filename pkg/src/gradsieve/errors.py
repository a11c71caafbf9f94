"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller violated an interface contract (layout mismatch, bad batch kind, ...)."""


class NumericError(RuntimeError):
    """A numeric computation produced non-finite values or an unusable system."""


class ConfigError(ValueError):
    """Invalid configuration: unknown key, unparseable value, or bad file."""

    def __init__(self, message: str, line: int | None = None, col: int | None = None):
        super().__init__(message)
        self.line = line
        self.col = col
