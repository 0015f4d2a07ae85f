"""
Model Module

Dense encoder-decoder segmentation network and its composite loss.
"""

from eyeseg_dg.model.loss import BatchTargets, LossBreakdown, collate, ellseg_loss
from eyeseg_dg.model.network import (
    DenseEllipseNet,
    ModelConfig,
    ModelOutput,
    build_model,
    centers_from_logits,
    parameter_count,
)

__all__ = [
    "BatchTargets", "LossBreakdown", "collate", "ellseg_loss", "DenseEllipseNet", "ModelConfig",
    "ModelOutput", "build_model", "centers_from_logits", "parameter_count",
]
