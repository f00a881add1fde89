"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments that break its contract."""


class DatasetError(RuntimeError):
    """A dataset directory is missing, incomplete, or corrupt."""


class ConfigError(ValueError):
    """A run configuration is malformed (unknown keys, bad values)."""
