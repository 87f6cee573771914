"""Swin-transformer encoder/noise/decoder image watermarking."""

from .core import ExperimentConfig, default_config, tiny_config

__version__ = "0.1.0"
__all__ = ["ExperimentConfig", "default_config", "tiny_config"]
