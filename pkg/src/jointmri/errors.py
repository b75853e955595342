"""Exception hierarchy shared by all modules."""


class JointMRIError(Exception):
    """Base class for package errors."""


class DimensionError(JointMRIError, ValueError):
    """Array shapes are incompatible or unsupported."""


class ContractError(JointMRIError, ValueError):
    """An argument violates a documented precondition."""


class ConfigError(JointMRIError, ValueError):
    """Invalid configuration value."""


class DataError(JointMRIError):
    """Dataset files are missing, malformed or inconsistent."""


class NumericalError(JointMRIError, RuntimeError):
    """Training produced non-finite values."""
