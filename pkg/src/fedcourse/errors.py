"""Exception types shared across the package."""


class DatasetError(ValueError):
    """Malformed or inconsistent input data (CSV records, catalog files)."""


class ConfigError(ValueError):
    """Invalid experiment configuration."""


class ProtocolError(RuntimeError):
    """Malformed or out-of-contract coordination message."""


class TrainingError(RuntimeError):
    """Training failed in a way that invalidates the current round."""


class NumericsError(ArithmeticError):
    """A model computation produced a non-finite value."""
