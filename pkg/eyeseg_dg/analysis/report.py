"""
Results Report

Collects per-run metrics.csv files, normalizes every run against the
within-dataset run of its evaluation domain, and writes:

    metrics.csv    one row per image per run
    summary.json   boxplot statistics and verdicts per evaluation domain
    boxplots.csv   the same statistics flattened for plotting tools
    tables.csv     median absolute metrics, training set x evaluation domain
"""

import glob
import json
import logging
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from eyeseg_dg.analysis.metrics import METRICS, MetricRecord, boxplot_stats, mad_normalize, metric_values
from eyeseg_dg.utils.errors import MetricError, MissingInputError
from eyeseg_dg.utils.io import atomic_write_text, load_csv, save_to_csv

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
HEADLINE_METRIC = "e_p"
METRICS_FIELDS = ["run_id", "test_kind", "train_domains", "eval_domain", "sample_id", "miou", "e_p", "e_i"]
REPORT_FORMATS = ("csv", "json", "boxplot", "tables")
# larger is better only for mIoU
HIGHER_IS_BETTER = {"miou": True, "e_p": False, "e_i": False}


@dataclass
class RunMetrics:
    """Per-image records of one run on one evaluation domain"""
    run_id: str
    test_kind: str
    train_domains: Tuple[str, ...]
    eval_domain: str
    records: List[MetricRecord] = field(default_factory=list)

    @property
    def augment(self) -> bool:
        return self.run_id.endswith("__aug")

    def values(self, metric: str) -> np.ndarray:
        return metric_values(self.records, metric)

    def rows(self) -> List[Dict[str, Any]]:
        base = {"run_id": self.run_id, "test_kind": self.test_kind,
                "train_domains": "+".join(self.train_domains), "eval_domain": self.eval_domain}
        return [{**base, **r.to_dict()} for r in self.records]


def _parse_value(text: str) -> Optional[float]:
    return None if text == "" else float(text)


def parse_rows(rows: Sequence[Dict[str, str]]) -> List[RunMetrics]:
    """Group CSV rows into runs, ordered by (evaluation domain, run id)"""
    runs: Dict[Tuple[str, str], RunMetrics] = {}
    for row in rows:
        key = (row["eval_domain"], row["run_id"])
        if key not in runs:
            runs[key] = RunMetrics(row["run_id"], row["test_kind"], tuple(row["train_domains"].split("+")),
                                   row["eval_domain"])
        runs[key].records.append(MetricRecord(row["sample_id"], _parse_value(row["miou"]),
                                              _parse_value(row["e_p"]), _parse_value(row["e_i"])))
    out = [runs[k] for k in sorted(runs)]
    for run in out:
        run.records.sort(key=lambda r: r.sample_id)
    return out


def load_results(results_dir: str) -> List[RunMetrics]:
    """
    Read every <target>/<run-id>/metrics.csv below a results directory

    Raises:
        MissingInputError: If the directory holds no metrics file
    """
    if not os.path.isdir(results_dir):
        raise MissingInputError(f"Results directory {results_dir} does not exist")
    paths = sorted(glob.glob(os.path.join(results_dir, "*", "*", "metrics.csv")))
    if not paths:
        raise MissingInputError(f"No <target>/<run-id>/metrics.csv under {results_dir}; "
                                f"run `eyeseg-dg run` first")
    rows = []
    for path in paths:
        rows.extend(load_csv(path))
    logger.info(f"Loaded {len(rows)} metric rows from {len(paths)} run(s) in {results_dir}")
    return parse_rows(rows)


# ===================== verdicts =====================

def _improvement(run: RunMetrics, metric: str, baseline: RunMetrics) -> Optional[float]:
    """Median normalized value, signed so that positive means better than the baseline"""
    values = run.values(metric)
    if len(values) == 0:
        return None
    normalized = mad_normalize(values, baseline.values(metric), baseline.run_id).median
    return normalized if HIGHER_IS_BETTER[metric] else -normalized


def _arm_gaps(runs: Sequence[RunMetrics], metric: str, baseline: RunMetrics) -> Dict[str, Any]:
    gains = {r.run_id: _improvement(r, metric, baseline) for r in runs}
    cross = [r for r in runs if r.test_kind == "cross_dataset" and gains[r.run_id] is not None]
    loo = [r for r in runs if r.test_kind == "leave_one_out" and gains[r.run_id] is not None]
    everything = [r for r in runs if r.test_kind == "all_vs_one" and gains[r.run_id] is not None]
    out: Dict[str, Any] = {"gains": gains, "h1": None, "h2": None}
    if cross and loo:
        best = max(cross, key=lambda r: (gains[r.run_id], r.run_id))
        out["h1"] = {"best_cross": best.run_id, "leave_one_out": loo[0].run_id,
                     "gap": gains[loo[0].run_id] - gains[best.run_id]}
    if everything:
        out["h2"] = {"all_vs_one": everything[0].run_id, "gap": gains[everything[0].run_id]}
    return out


def _h1_verdict(gap: float) -> str:
    return "multiset" if gap > 0 else "dataset-specific"


def _h2_verdict(gap: float, tolerance: float) -> str:
    if gap > tolerance:
        return "shift-mitigated"
    if gap < -tolerance:
        return "capacity-limited"
    return "ceiling-matched"


def compare_tests(results: Sequence[RunMetrics], tolerance: float = 0.2) -> Dict[str, Any]:
    """
    Hypothesis verdicts for one evaluation domain

    H1 compares leave-one-out with the best cross-dataset model, H2 compares
    all-vs-one with the within-dataset ceiling, H3 compares the augmented arm's
    H1 ordering with the plain arm's. Gaps are medians of per-image pupil
    errors in baseline MAD units, signed so that positive favors the multiset
    model. mIoU and iris-error gaps are reported alongside when available.

    Args:
        results: Runs evaluated on one domain, both augmentation arms allowed
        tolerance: MAD band inside which H2 reads "ceiling-matched"

    Returns:
        Dict verdict record

    Raises:
        MissingInputError: Without a plain within-dataset run
        MetricError: If the baseline spread is zero
    """
    domains = {r.eval_domain for r in results}
    if len(domains) != 1:
        raise MetricError(f"compare_tests takes one evaluation domain, got {sorted(domains)}")
    target = domains.pop()
    plain = [r for r in results if not r.augment]
    augmented = [r for r in results if r.augment]
    within = [r for r in plain if r.test_kind == "within_dataset"]
    if not within:
        raise MissingInputError(f"No within-dataset run for {target}; add 'within_dataset' to suite.kinds "
                                f"and rerun before reporting")
    baseline = within[0]

    record: Dict[str, Any] = {
        "eval_domain": target,
        "metric": HEADLINE_METRIC,
        "baseline": {"run_id": baseline.run_id},
        "H1": None,
        "H2": None,
        "H3": None,
        "analogs": {},
    }
    base_values = baseline.values(HEADLINE_METRIC)
    norm = mad_normalize(base_values, base_values, baseline.run_id)
    record["baseline"].update({"median": norm.baseline_median, "mad": norm.baseline_mad})

    plain_gaps = _arm_gaps(plain, HEADLINE_METRIC, baseline)
    record["gains"] = plain_gaps["gains"]
    if plain_gaps["h1"] is not None:
        record["H1"] = {**plain_gaps["h1"], "verdict": _h1_verdict(plain_gaps["h1"]["gap"])}
    if plain_gaps["h2"] is not None:
        record["H2"] = {**plain_gaps["h2"], "tolerance": tolerance,
                        "verdict": _h2_verdict(plain_gaps["h2"]["gap"], tolerance)}
    if record["H1"] is None and record["H2"] is None:
        logger.warning(f"{target}: neither cross-dataset + leave-one-out nor all-vs-one runs present")

    if augmented:
        aug_gaps = _arm_gaps(augmented, HEADLINE_METRIC, baseline)
        h3: Dict[str, Any] = {"gains": aug_gaps["gains"], "verdict": None}
        if plain_gaps["h1"] is not None and aug_gaps["h1"] is not None:
            before = _h1_verdict(plain_gaps["h1"]["gap"])
            after = _h1_verdict(aug_gaps["h1"]["gap"])
            h3.update({"plain_h1": before, "augmented_h1": after, "augmented_gap": aug_gaps["h1"]["gap"]})
            if before == after:
                h3["verdict"] = "ordering-preserved"
            elif before == "multiset":
                h3["verdict"] = "augmentation-sufficient"
            else:
                h3["verdict"] = "ordering-changed"
        record["H3"] = h3

    for metric in METRICS:
        if metric == HEADLINE_METRIC:
            continue
        try:
            gaps = _arm_gaps(plain, metric, baseline)
        except MetricError as e:
            logger.debug(f"{target}: no {metric} analog ({e})")
            continue
        record["analogs"][metric] = {
            "H1_gap": None if gaps["h1"] is None else gaps["h1"]["gap"],
            "H2_gap": None if gaps["h2"] is None else gaps["h2"]["gap"],
        }
    return record


# ===================== emission =====================

def _stats_block(run: RunMetrics, baseline: Optional[RunMetrics]) -> Dict[str, Any]:
    block = {}
    for metric in METRICS:
        values = run.values(metric)
        if len(values) == 0:
            block[metric] = None
            continue
        entry = {"absolute": boxplot_stats(values).to_dict(), "normalized": None}
        if baseline is not None and len(baseline.values(metric)) >= 2:
            try:
                normalized = mad_normalize(values, baseline.values(metric), baseline.run_id)
                entry["normalized"] = boxplot_stats(normalized.values).to_dict()
            except MetricError as e:
                logger.warning(f"{run.eval_domain}/{run.run_id} {metric}: {e}")
        block[metric] = entry
    return block


def _group_by_domain(results: Sequence[RunMetrics]) -> "OrderedDict[str, List[RunMetrics]]":
    grouped: "OrderedDict[str, List[RunMetrics]]" = OrderedDict()
    for run in sorted(results, key=lambda r: (r.eval_domain, r.run_id)):
        grouped.setdefault(run.eval_domain, []).append(run)
    return grouped


def build_summary(results: Sequence[RunMetrics], tolerance: float = 0.2) -> Dict[str, Any]:
    summary: Dict[str, Any] = {"schema": SCHEMA_VERSION, "domains": {}}
    for domain, runs in _group_by_domain(results).items():
        within = [r for r in runs if r.test_kind == "within_dataset" and not r.augment]
        baseline = within[0] if within else None
        summary["domains"][domain] = {
            "tests": {r.run_id: {"test_kind": r.test_kind, "train_domains": list(r.train_domains),
                                 "images": len(r.records), "stats": _stats_block(r, baseline)} for r in runs},
            "verdicts": compare_tests(runs, tolerance),
        }
    return summary


def boxplot_rows(summary: Dict[str, Any]) -> List[Dict[str, Any]]:
    rows = []
    for domain, block in summary["domains"].items():
        for run_id, test in block["tests"].items():
            for metric in METRICS:
                entry = test["stats"][metric]
                if entry is None:
                    continue
                for scale in ("absolute", "normalized"):
                    stats = entry[scale]
                    if stats is None:
                        continue
                    rows.append({"eval_domain": domain, "run_id": run_id, "test_kind": test["test_kind"],
                                 "metric": metric, "scale": scale, **stats})
    return rows


def table_rows(results: Sequence[RunMetrics]) -> Tuple[List[Dict[str, Any]], List[str]]:
    """Median absolute metric per (metric, training row) and evaluation domain"""
    domains = sorted({r.eval_domain for r in results})
    cells: "OrderedDict[Tuple[str, str, str], Dict[str, Any]]" = OrderedDict()
    for metric in METRICS:
        for run in sorted(results, key=lambda r: (r.test_kind, r.run_id, r.eval_domain)):
            values = run.values(metric)
            if len(values) == 0:
                continue
            # within/all/loo share one row per kind; cross rows are per source domain
            train = "+".join(run.train_domains) if run.test_kind == "cross_dataset" else "*"
            key = (metric, run.test_kind + ("__aug" if run.augment else ""), train)
            row = cells.setdefault(key, {"metric": metric, "test_kind": key[1], "train_domains": train})
            row[run.eval_domain] = float(np.median(values))
    return list(cells.values()), ["metric", "test_kind", "train_domains"] + domains


def emit_report(results: Sequence[RunMetrics], out_dir: str, formats: Sequence[str] = REPORT_FORMATS,
                tolerance: float = 0.2) -> Dict[str, Any]:
    """
    Write the report files

    Args:
        results: Loaded runs
        out_dir: Report directory
        formats: Any of csv, json, boxplot, tables
        tolerance: H2 tolerance in MAD units

    Returns:
        Dict summary (the content of summary.json)

    Raises:
        MissingInputError: No results, or an evaluation domain without its within-dataset run
        OSError: If the report directory is not writable
    """
    if not results:
        raise MissingInputError("No results to report")
    os.makedirs(out_dir, exist_ok=True)
    summary = build_summary(results, tolerance)

    if "csv" in formats:
        rows = [row for run in sorted(results, key=lambda r: (r.eval_domain, r.run_id)) for row in run.rows()]
        save_to_csv(rows, os.path.join(out_dir, "metrics.csv"), METRICS_FIELDS)
    if "json" in formats:
        path = os.path.join(out_dir, "summary.json")
        atomic_write_text(path, json.dumps(summary, sort_keys=True, indent=2) + "\n")
        logger.info(f"Saved summary to {path}")
    if "boxplot" in formats:
        try:
            save_to_csv(boxplot_rows(summary), os.path.join(out_dir, "boxplots.csv"),
                        ["eval_domain", "run_id", "test_kind", "metric", "scale", "median", "q1", "q3", "notch", "n"])
        except OSError as e:
            logger.error(f"Skipping boxplot data: {e}")
    if "tables" in formats:
        try:
            rows, fields = table_rows(results)
            save_to_csv(rows, os.path.join(out_dir, "tables.csv"), fields)
        except OSError as e:
            logger.error(f"Skipping tables: {e}")
    return summary
