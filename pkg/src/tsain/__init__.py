"""Frame interpolation for serial-section electron microscopy.

A pure numpy/scipy implementation of a deformable-convolution interpolation
network: reverse-mode autodiff, modulated deformable convolution, temporal
and spatial adaptive blocks, refinement blocks, losses, metrics and a data
pipeline for section series.
"""

from .model import ModelConfig, TsainParams, count_parameters, init_params, tsain_forward
from .numerics import ConfigError, ShapeError, Tensor4, no_grad

__all__ = ["ModelConfig", "TsainParams", "count_parameters", "init_params", "tsain_forward",
           "ConfigError", "ShapeError", "Tensor4", "no_grad"]
__version__ = "0.1.0"
