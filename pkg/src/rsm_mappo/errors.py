class ConfigError(ValueError):
    """Invalid experiment, network, topology or road configuration."""


class NumericalError(FloatingPointError):
    """A training signal became non-finite."""
