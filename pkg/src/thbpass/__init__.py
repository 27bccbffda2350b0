"""Tri-hybrid (digital, analog, pinching) beamforming for fully-connected pinching-antenna systems."""
from .fp import AoResult, fp_optimize
from .model import BeamformerSet, ConfigError, SystemConfig
from .zf import zf_pipeline

__all__ = ["AoResult", "BeamformerSet", "ConfigError", "SystemConfig", "fp_optimize",
           "zf_pipeline"]
__version__ = "0.1.0"
