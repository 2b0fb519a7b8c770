"""Exception types mapped to CLI exit codes (config=2, data=3, numerical=4)."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class DataError(ValueError):
    """Malformed, missing, or out-of-contract data."""


class NumericalError(RuntimeError):
    """Factorization failure, non-finite objective, or similar numerical breakdown."""
