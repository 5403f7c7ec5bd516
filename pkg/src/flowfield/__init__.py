"""Conditional flow-matching surrogate models for field data on ordered
point sets: tensors with reverse-mode autodiff, U-Net/DiT/MLP architectures,
training, guided Euler sampling and evaluation."""

from .tensor import Tensor, grad_check, no_grad, zero_grads
from .flowmatch import (FlowState, SamplerConfig, euler_sample,
                        euler_sample_batch, fm_loss, guided_velocity,
                        interpolate, target_velocity)
from .nn import DROPPED

__version__ = "0.1.0"

__all__ = [
    "Tensor", "grad_check", "no_grad", "zero_grads",
    "FlowState", "SamplerConfig", "euler_sample", "euler_sample_batch",
    "fm_loss", "guided_velocity", "interpolate", "target_velocity",
    "DROPPED", "__version__",
]
