"""Cross-domain few-shot learning with unlabelled target-domain data."""

from xdfsl.errors import CapacityError, ConfigError, NumericError, ValidationError

__version__ = "0.1.0"

__all__ = ["CapacityError", "ConfigError", "NumericError", "ValidationError", "__version__"]
