"""
Domain Statistics

Pupil-center scatter, iris-pixel proportion and pupil luminance z-scores for a
dataset, computed the same way for any split. Predicted masks stand in for
ground truth when a domain ships without masks.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np

from eyeseg_dg.geometry.ellipse import IRIS, PUPIL
from eyeseg_dg.synth.domains import DomainDataset
from eyeseg_dg.utils.errors import IntegrityError

logger = logging.getLogger(__name__)


@dataclass
class DomainStats:
    """Absent fields are None, never zero"""
    domain: str
    n_samples: int
    center_mean: Optional[Tuple[float, float]] = None
    center_scatter: Optional[Tuple[float, float]] = None
    iris_fraction_mean: Optional[float] = None
    iris_fraction_var: Optional[float] = None
    pupil_z_median: Optional[float] = None
    pupil_z_scores: List[float] = field(default_factory=list)
    mask_source: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["pupil_z_scores"] = list(self.pupil_z_scores)
        return out


def domain_stats(dataset: DomainDataset, predictions: Optional[Mapping[str, np.ndarray]] = None) -> DomainStats:
    """
    Summarize a dataset's pose and luminance distributions

    Args:
        dataset: Samples to summarize
        predictions: Optional sample_id -> predicted SegMask, used where a
            sample has no ground-truth mask

    Returns:
        DomainStats: Scatter from annotated pupil centers; mask-derived fields
        absent when no mask source exists
    """
    if len(dataset) == 0:
        raise IntegrityError(f"Domain {dataset.name} is empty")
    predictions = predictions or {}

    centers = [s.pupil_point() for s in dataset if s.pupil_point() is not None]
    stats = DomainStats(domain=dataset.name, n_samples=len(dataset))
    if centers:
        pts = np.asarray(centers, dtype=np.float64)
        stats.center_mean = (float(pts[:, 0].mean()), float(pts[:, 1].mean()))
        stats.center_scatter = (float(pts[:, 0].std()), float(pts[:, 1].std()))

    fractions, z_scores, sources = [], [], set()
    for sample in dataset:
        if sample.seg_mask is not None:
            mask = sample.seg_mask
            sources.add("annotation")
        elif sample.sample_id in predictions:
            mask = predictions[sample.sample_id]
            sources.add("prediction")
        else:
            continue
        fractions.append(float(np.mean(mask == IRIS)))
        pupil = mask == PUPIL
        std = float(sample.image.std())
        if pupil.any() and std > 0:
            z_scores.append((float(sample.image[pupil].mean()) - float(sample.image.mean())) / std)

    if fractions:
        stats.iris_fraction_mean = float(np.mean(fractions))
        stats.iris_fraction_var = float(np.var(fractions))
        stats.mask_source = "mixed" if len(sources) > 1 else sources.pop()
    if z_scores:
        stats.pupil_z_scores = z_scores
        stats.pupil_z_median = float(np.median(z_scores))
    else:
        logger.debug(f"No mask source for luminance statistics in {dataset.name}")
    return stats
