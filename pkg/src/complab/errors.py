"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
DivergenceError -> 4.
"""


class ComplabError(Exception):
    pass


class ConfigError(ComplabError):
    """Invalid configuration value or malformed config file."""


class DataError(ComplabError):
    """Missing, corrupt, or dimensionally incompatible data/checkpoint files."""


class DivergenceError(ComplabError):
    """Training produced a non-finite loss."""


class PredictorNotReadyError(ComplabError):
    """Learned neighbor predictor queried before any training step."""
