"""
Evaluation Metrics

Per-image metrics (mIoU, center errors), robust normalization in MAD units and
boxplot statistics. Absent annotations stay absent: they are never imputed.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import median_abs_deviation

from eyeseg_dg.utils.errors import MetricError

logger = logging.getLogger(__name__)

METRICS = ("miou", "e_p", "e_i")
# 95% confidence notch of the median
NOTCH_FACTOR = 1.57


@dataclass(frozen=True)
class MetricRecord:
    sample_id: str
    miou: Optional[float] = None
    e_p: Optional[float] = None
    e_i: Optional[float] = None

    def __post_init__(self):
        if self.miou is None and self.e_p is None and self.e_i is None:
            raise MetricError(f"Metric record for {self.sample_id} has no value")
        if self.miou is not None and not 0.0 <= self.miou <= 1.0:
            raise MetricError(f"mIoU {self.miou} outside [0, 1] for {self.sample_id}")

    def get(self, metric: str) -> Optional[float]:
        return getattr(self, metric)

    def to_dict(self) -> Dict[str, Optional[float]]:
        return asdict(self)


def miou(pred: np.ndarray, gt: np.ndarray, classes: Sequence[int] = (0, 1, 2)) -> float:
    """
    Mean intersection-over-union over classes present in either mask

    Raises:
        MetricError: On mismatched extents or when no class occurs in either mask
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise MetricError(f"Mask extents differ: {pred.shape} vs {gt.shape}")
    scores = []
    for c in classes:
        p, g = pred == c, gt == c
        union = np.count_nonzero(p | g)
        if union == 0:
            continue
        scores.append(np.count_nonzero(p & g) / union)
    if not scores:
        raise MetricError("No class present in either mask")
    return float(np.mean(scores))


def center_error(pred: Optional[Tuple[float, float]], gt: Optional[Tuple[float, float]]) -> Optional[float]:
    """Euclidean distance in pixels; None when either point is missing"""
    if pred is None or gt is None:
        return None
    return float(math.hypot(pred[0] - gt[0], pred[1] - gt[1]))


def metric_values(records: Iterable[MetricRecord], metric: str) -> np.ndarray:
    return np.array([r.get(metric) for r in records if r.get(metric) is not None], dtype=np.float64)


def mean_metrics(records: Sequence[MetricRecord]) -> Dict[str, Optional[float]]:
    """Mean of each metric over the records that carry it"""
    out = {}
    for metric in METRICS:
        values = metric_values(records, metric)
        out[metric] = float(values.mean()) if len(values) else None
    return out


@dataclass
class NormalizedSeries:
    """
    Values in MAD units of a baseline

    For errors negative means better than the baseline; for mIoU positive does.
    """
    values: np.ndarray
    baseline_id: str
    baseline_median: float
    baseline_mad: float

    @property
    def median(self) -> float:
        return float(np.median(self.values))


def mad_normalize(series: Sequence[float], baseline: Sequence[float], baseline_id: str = "") -> NormalizedSeries:
    """
    Express values as (v - median(baseline)) / MAD(baseline)

    Raises:
        MetricError: Baseline with fewer than two values or zero MAD
    """
    base = np.asarray(baseline, dtype=np.float64)
    if len(base) < 2:
        raise MetricError(f"Baseline {baseline_id or '(unnamed)'} needs at least 2 values, got {len(base)}")
    med = float(np.median(base))
    mad = float(median_abs_deviation(base, scale=1.0))
    if mad == 0.0:
        raise MetricError(f"Baseline {baseline_id or '(unnamed)'} has zero MAD; more than half of its values "
                          f"equal the median ({med}). Inspect the within-dataset run for a degenerate result.")
    values = (np.asarray(series, dtype=np.float64) - med) / mad
    return NormalizedSeries(values, baseline_id, med, mad)


@dataclass(frozen=True)
class BoxplotStats:
    median: float
    q1: float
    q3: float
    notch: float     # half-width of the median confidence interval
    n: int

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def boxplot_stats(values: Sequence[float]) -> BoxplotStats:
    """Linear-interpolation quartiles and the notch 1.57 * IQR / sqrt(n)"""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise MetricError("boxplot_stats needs at least one value")
    q1, median, q3 = np.percentile(arr, [25, 50, 75], method="linear")
    notch = NOTCH_FACTOR * (q3 - q1) / math.sqrt(arr.size)
    return BoxplotStats(float(median), float(q1), float(q3), float(notch), int(arr.size))
