"""
Analysis Module

Per-image metrics, MAD normalization, hypothesis verdicts and report files.
"""

from eyeseg_dg.analysis.metrics import (
    BoxplotStats,
    MetricRecord,
    NormalizedSeries,
    boxplot_stats,
    center_error,
    mad_normalize,
    miou,
)
from eyeseg_dg.analysis.report import RunMetrics, compare_tests, emit_report, load_results

__all__ = [
    "BoxplotStats", "MetricRecord", "NormalizedSeries", "boxplot_stats", "center_error", "mad_normalize",
    "miou", "RunMetrics", "compare_tests", "emit_report", "load_results",
]
