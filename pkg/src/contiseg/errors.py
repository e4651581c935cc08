"""Shared exception types."""


class ContractError(ValueError):
    """An operation was called with inputs violating its contract."""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class TrainingDiverged(RuntimeError):
    """Training produced a non-finite loss; a diagnostic snapshot was written."""
