"""Exception types shared across modules; the CLI maps each to an exit code."""


class ConfigError(ValueError):
    """Bad or unknown configuration (exit code 2)."""


class DataError(ValueError):
    """Unreadable, malformed or insufficient data (exit code 3)."""


class ContractViolation(RuntimeError):
    """A guarantee was broken at run time, e.g. a frozen backbone changed (exit code 4)."""
