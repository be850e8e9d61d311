from .config import CONFIG_SCHEMA, ConfigError, load_config, model_from_config, validate_config
from .images import read_pnm, write_pnm
from .weights import (WeightFormatError, WeightMismatchError, load_weights, read_weights,
                      save_weights)

__all__ = ["CONFIG_SCHEMA", "ConfigError", "load_config", "model_from_config", "validate_config",
           "read_pnm", "write_pnm", "WeightFormatError", "WeightMismatchError", "load_weights",
           "read_weights", "save_weights"]
