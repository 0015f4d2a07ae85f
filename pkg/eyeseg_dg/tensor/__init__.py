"""
Tensor Kernel Module

Dense tensors with reverse-mode differentiation, the layers the segmentation
model needs, ADAM and the binary checkpoint format.
"""

from eyeseg_dg.tensor.autodiff import Tensor, no_grad
from eyeseg_dg.tensor.functional import (
    NormalizationMode,
    conv2d,
    normalize,
    softmax_channels,
)
from eyeseg_dg.tensor.optim import AdamState, adam_step

__all__ = [
    "Tensor", "no_grad", "NormalizationMode", "conv2d", "normalize",
    "softmax_channels", "AdamState", "adam_step",
]
