"""
Composite Segmentation Loss

Cross-entropy on full-ellipse masks, diagonal-normalized L1 on soft-argmax
centers and L1 on encoded ellipse parameters. Each term only sees the samples
that carry the matching annotation, so missing annotations contribute exactly
zero loss and zero gradient.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from eyeseg_dg.geometry.ellipse import Ellipse
from eyeseg_dg.model.network import N_CLASSES, ModelOutput
from eyeseg_dg.synth.domains import EyeSample
from eyeseg_dg.tensor import functional as F
from eyeseg_dg.tensor.autodiff import Tensor, absolute, cos, sin
from eyeseg_dg.utils.errors import LossError

logger = logging.getLogger(__name__)

DEFAULT_WEIGHTS = {"seg": 1.0, "center": 1.0, "ellipse": 0.5}


@dataclass
class BatchTargets:
    """Annotations of one batch, stacked, with per-sample availability flags"""
    images: np.ndarray                 # (N, 1, H, W)
    masks: np.ndarray                  # (M, H, W) labels for the samples in mask_index
    mask_index: np.ndarray             # (M,)
    pupil_centers: np.ndarray          # (N, 2), rows valid where has_pupil_center
    iris_centers: np.ndarray
    has_pupil_center: np.ndarray       # (N,) bool
    has_iris_center: np.ndarray
    ellipses: np.ndarray               # (N, 2, 5) encoded, rows valid where has_*_ellipse
    has_pupil_ellipse: np.ndarray
    has_iris_ellipse: np.ndarray
    sample_ids: List[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.images.shape[0]


def encode_ellipse(e: Ellipse, height: int, width: int) -> np.ndarray:
    """(cx/W, cy/H, log a, log b, theta)"""
    return np.array([e.cx / width, e.cy / height, math.log(e.a), math.log(e.b), e.theta])


def collate(samples: Sequence[EyeSample], dtype=np.float32) -> BatchTargets:
    """Stack images and annotations; absent fields are zero-filled and flagged"""
    n = len(samples)
    h, w = samples[0].height, samples[0].width
    images = np.stack([s.image for s in samples]).reshape(n, 1, h, w).astype(dtype)
    mask_index = np.array([i for i, s in enumerate(samples) if s.seg_mask is not None], dtype=np.int64)
    masks = (np.stack([samples[i].seg_mask for i in mask_index]).astype(np.int64)
             if len(mask_index) else np.zeros((0, h, w), dtype=np.int64))

    pupil = np.zeros((n, 2))
    iris = np.zeros((n, 2))
    ellipses = np.zeros((n, 2, 5))
    flags = {k: np.zeros(n, dtype=bool) for k in ("pc", "ic", "pe", "ie")}
    for i, s in enumerate(samples):
        if s.pupil_point() is not None:
            pupil[i] = s.pupil_point()
            flags["pc"][i] = True
        if s.iris_point() is not None:
            iris[i] = s.iris_point()
            flags["ic"][i] = True
        if s.pupil_ellipse is not None:
            ellipses[i, 0] = encode_ellipse(s.pupil_ellipse, h, w)
            flags["pe"][i] = True
        if s.iris_ellipse is not None:
            ellipses[i, 1] = encode_ellipse(s.iris_ellipse, h, w)
            flags["ie"][i] = True
    return BatchTargets(images, masks, mask_index, pupil, iris, flags["pc"], flags["ic"],
                        ellipses, flags["pe"], flags["ie"], [s.sample_id for s in samples])


@dataclass
class LossBreakdown:
    total: Tensor
    terms: Dict[str, Optional[float]]

    def to_dict(self) -> Dict[str, Optional[float]]:
        return {"total": self.total.item(), **self.terms}


def segmentation_term(logits: Tensor, targets: BatchTargets) -> Tensor:
    """Mean per-pixel cross-entropy over the samples that have masks"""
    log_probs = F.log_softmax_channels(logits[targets.mask_index])
    one_hot = np.eye(N_CLASSES, dtype=logits.dtype)[targets.masks]          # (M, H, W, 3)
    one_hot = np.ascontiguousarray(np.moveaxis(one_hot, -1, 1))
    m, _, h, w = one_hot.shape
    return -(log_probs * one_hot).sum() * (1.0 / (m * h * w))


def center_term(out: ModelOutput, targets: BatchTargets, height: int, width: int) -> Optional[Tensor]:
    """Mean (|dx| + |dy|) / diagonal over every available pupil and iris center"""
    diagonal = math.hypot(height, width)
    parts, count = [], 0
    for pred, gt, avail in ((out.pupil_center, targets.pupil_centers, targets.has_pupil_center),
                            (out.iris_center, targets.iris_centers, targets.has_iris_center)):
        index = np.flatnonzero(avail)
        if len(index) == 0:
            continue
        diff = pred[index] - gt[index].astype(pred.dtype)
        parts.append(absolute(diff).sum())
        count += len(index)
    if not parts:
        return None
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total * (1.0 / (diagonal * count))


def ellipse_term(params: Tensor, targets: BatchTargets) -> Optional[Tensor]:
    """L1 on (cx/W, cy/H, log a, log b) plus (sin 2theta, cos 2theta)"""
    rows = np.concatenate([np.flatnonzero(targets.has_pupil_ellipse), np.flatnonzero(targets.has_iris_ellipse)])
    cols = np.concatenate([np.zeros(targets.has_pupil_ellipse.sum(), dtype=np.int64),
                           np.ones(targets.has_iris_ellipse.sum(), dtype=np.int64)])
    if len(rows) == 0:
        return None
    pred = params[rows, cols]                                               # (K, 5)
    gt = targets.ellipses[rows, cols].astype(params.dtype)
    linear_part = absolute(pred[:, :4] - gt[:, :4]).sum()
    angle = pred[:, 4] * 2.0
    angle_part = (absolute(sin(angle) - np.sin(2.0 * gt[:, 4])).sum()
                  + absolute(cos(angle) - np.cos(2.0 * gt[:, 4])).sum())
    return (linear_part + angle_part) * (1.0 / len(rows))


def ellseg_loss(out: ModelOutput, targets: BatchTargets,
                weights: Optional[Dict[str, float]] = None) -> LossBreakdown:
    """
    Weighted sum of the available loss terms

    Args:
        out: Model output for the batch
        targets: Collated annotations with availability flags
        weights: Per-term weights keyed seg/center/ellipse

    Returns:
        LossBreakdown: Scalar total plus per-term values (None when unavailable)

    Raises:
        LossError: If no sample in the batch carries a usable annotation
    """
    weights = {**DEFAULT_WEIGHTS, **(weights or {})}
    _, _, height, width = out.seg_logits.shape
    terms: Dict[str, Optional[float]] = {"seg": None, "center": None, "ellipse": None}
    weighted = []

    if len(targets.mask_index):
        seg = segmentation_term(out.seg_logits, targets)
        terms["seg"] = seg.item()
        weighted.append(seg * weights["seg"])
    center = center_term(out, targets, height, width)
    if center is not None:
        terms["center"] = center.item()
        weighted.append(center * weights["center"])
    if out.ellipse_params is not None:
        ellipse = ellipse_term(out.ellipse_params, targets)
        if ellipse is not None:
            terms["ellipse"] = ellipse.item()
            weighted.append(ellipse * weights["ellipse"])

    if not weighted:
        raise LossError(f"Batch of {targets.size} samples has no usable annotation")
    total = weighted[0]
    for term in weighted[1:]:
        total = total + term
    return LossBreakdown(total, terms)
