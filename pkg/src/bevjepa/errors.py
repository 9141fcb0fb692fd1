"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Bad or inconsistent configuration (unknown key, invalid value)."""


class FormatError(ValueError):
    """Malformed on-disk data (truncated file, bad magic, bad field)."""


class ContractError(RuntimeError):
    """A caller violated a documented precondition (e.g. uncropped points)."""


class NumericsError(RuntimeError):
    """Non-finite value where a finite one is required (NaN loss/gradient)."""

    def __init__(self, message, breakdown=None):
        super().__init__(message)
        self.breakdown = breakdown
