"""Lip-sync forgery detection from audio-visual composite windows."""

from .config import RunConfig, load_config, tiny_config
from .errors import (
    ConfigError,
    LipFDError,
    ManifestParseError,
    MissingMediaError,
    NumericError,
    StateError,
    ValidationError,
    WindowRangeError,
)
from .model import FeatureStack, LipFD, fuse, loss_ra, loss_total

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "FeatureStack",
    "LipFD",
    "LipFDError",
    "ManifestParseError",
    "MissingMediaError",
    "NumericError",
    "RunConfig",
    "StateError",
    "ValidationError",
    "WindowRangeError",
    "fuse",
    "load_config",
    "loss_ra",
    "loss_total",
    "tiny_config",
]
