"""Joint learning of k-space sampling, reconstruction and segmentation."""

from jointmri.errors import (
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    NumericalError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "DimensionError",
    "NumericalError",
]
