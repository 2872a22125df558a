"""Exception hierarchy shared by every subsystem."""


class FedDecompError(Exception):
    """Base class; ``category`` maps onto CLI exit codes."""

    category = "numeric"


class DimensionError(FedDecompError, ValueError):
    category = "data"


class ValidationError(FedDecompError, ValueError):
    category = "config"


class ContractError(FedDecompError, RuntimeError):
    category = "numeric"


class CapacityError(FedDecompError, ValueError):
    category = "data"


class FormatError(FedDecompError, ValueError):
    category = "data"


class NumericError(FedDecompError, FloatingPointError):
    category = "numeric"


class ConfigError(FedDecompError, ValueError):
    """Config-file problem; message names the key and line."""

    category = "config"
