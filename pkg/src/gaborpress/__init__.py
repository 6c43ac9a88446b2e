"""Gabor-parameterized convolution layers for CNN training and structured pruning."""

__version__ = "0.1.0"

from .gabor import GaborParams, GaborParamGrads, synth_kernel, gabor_param_grads, finite_diff_grads

__all__ = [
    "GaborParams",
    "GaborParamGrads",
    "synth_kernel",
    "gabor_param_grads",
    "finite_diff_grads",
]
