"""Class-balanced mean teacher for source-free domain adaptive segmentation."""
from .datamodel import CbmtConfig, ConfigError, FilterMode, ImageSample, ParamSnapshot, validate_config

__version__ = "0.1.0"
__all__ = ["CbmtConfig", "ConfigError", "FilterMode", "ImageSample", "ParamSnapshot", "validate_config"]
