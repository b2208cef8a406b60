"""Exception types shared across the toolkit."""


class ConfigError(ValueError):
    """A model or training configuration violates a structural constraint."""


class DataError(ValueError):
    """A dataset, file, or on-disk artifact is malformed or missing."""


class NumericError(RuntimeError):
    """Training produced a non-finite loss; the run must abort."""
