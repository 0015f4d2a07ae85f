#!/usr/bin/env python3
"""
Test script for the command line

Exit codes, dry-run planning, rendering, statistics and verdict printing.
"""

import json
import logging
import os

import pytest

from eyeseg_dg.analysis.metrics import MetricRecord
from eyeseg_dg.analysis.report import METRICS_FIELDS, RunMetrics
from eyeseg_dg.main import main, parse_args
from eyeseg_dg.model.network import ModelConfig
from eyeseg_dg.protocol.trainer import TrainConfig, train
from eyeseg_dg.synth.domains import load_domain_specs, make_domain
from eyeseg_dg.utils.io import save_to_csv

# Set up logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s [%(levelname)s] %(name)s: %(message)s')
logger = logging.getLogger(__name__)

SMALL_CONFIG = """\
experiment: cli
registry:
  height: 24
  width: 32
  images_per_subject: 1
  include: [lab_a, lab_b]
suite:
  targets: [lab_a]
"""


def write_config(tmp_path, text=SMALL_CONFIG):
    path = tmp_path / "experiment.yaml"
    path.write_text(text)
    return str(path)


def write_fixture_results(root):
    medians = {"within_dataset__a": 1.0, "cross_dataset__b": 1.2, "leave_one_out__b+c": 1.5,
               "all_vs_one__a+b+c": 1.0}
    for run_id, median in medians.items():
        records = [MetricRecord(f"a/000/{i:04d}", e_p=median + d) for i, d in enumerate((-0.2, -0.1, 0.0, 0.1, 0.2))]
        run = RunMetrics(run_id, run_id.split("__")[0], tuple(run_id.split("__")[1].split("+")), "a", records)
        save_to_csv(run.rows(), os.path.join(str(root), "a", run_id, "metrics.csv"), METRICS_FIELDS)
    return str(root)


def test_command_is_required():
    with pytest.raises(SystemExit):
        parse_args([])


def test_unknown_config_key_exits_2(tmp_path):
    path = write_config(tmp_path, "train:\n  epochz: 3\n")
    assert main(["run", "--config", path, "--dry-run"]) == 2


def test_missing_config_exits_4(tmp_path):
    assert main(["run", "--config", str(tmp_path / "absent.yaml")]) == 4


def test_report_without_results_exits_4(tmp_path):
    assert main(["report", str(tmp_path / "nothing")]) == 4


def test_dry_run_prints_matrix(tmp_path, capsys):
    assert main(["run", "--config", write_config(tmp_path), "--dry-run"]) == 0
    out = capsys.readouterr().out
    assert "Run matrix for cli (4 runs):" in out
    assert "leave_one_out" in out and "reuses" in out
    assert not os.path.exists("runs/cli")


def test_report_prints_verdicts(tmp_path, capsys):
    results = write_fixture_results(tmp_path / "results")
    assert main(["report", results]) == 0
    out = capsys.readouterr().out
    assert "H1: dataset-specific" in out
    assert "H2: ceiling-matched" in out
    assert os.path.exists(os.path.join(results, "report", "summary.json"))


def test_synth_writes_domain_directories(tmp_path):
    out = tmp_path / "domains"
    assert main(["synth", "--config", write_config(tmp_path), "--out", str(out)]) == 0
    names = sorted(os.listdir(out))
    assert names == ["field_a", "field_b", "field_c", "lab_a", "lab_b", "lab_c"]
    with open(out / "lab_a" / "domain.json") as f:
        assert json.load(f)["height"] == 24


def test_stats_writes_json(tmp_path, capsys):
    target = tmp_path / "stats.json"
    assert main(["stats", "--config", write_config(tmp_path), "--out", str(target)]) == 0
    with open(target) as f:
        rows = json.load(f)
    assert [r["domain"] for r in rows] == ["lab_a", "lab_b"]
    assert "lab_b" in capsys.readouterr().out


def test_stats_with_predicted_masks(tmp_path):
    specs = {s.name: s for s in load_domain_specs("stock")}
    domains = [make_domain(specs[name], 2, height=24, width=32) for name in ("lab_a", "lab_b")]
    model_cfg = ModelConfig(base_channels=4, growth=1.0, blocks=2, height=24, width=32)
    run_dir = str(tmp_path / "trained")
    train(model_cfg, domains, domains[:1], TrainConfig(max_iterations=2, eval_every=2, seed=3), run_dir)

    target = tmp_path / "stats.json"
    assert main(["stats", "--config", write_config(tmp_path), "--predictions", run_dir,
                 "--out", str(target)]) == 0
    with open(target) as f:
        rows = {r["domain"]: r for r in json.load(f)}
    assert rows["lab_a"]["mask_source"] == "annotation"
    assert rows["lab_b"]["mask_source"] == "prediction"
    assert rows["lab_b"]["iris_fraction_mean"] is not None


def test_stats_predictions_need_a_training(tmp_path):
    assert main(["stats", "--config", write_config(tmp_path), "--predictions", str(tmp_path)]) == 4


def main_runner():
    """Main function"""
    import tempfile
    from pathlib import Path

    logger.info("Starting command line tests")
    tests = [(name, fn) for name, fn in globals().items() if name.startswith("test_") and callable(fn)]
    failed = 0
    for name, fn in tests:
        args = fn.__code__.co_varnames[:fn.__code__.co_argcount]
        if "capsys" in args:
            logger.info(f"Skipping {name} (needs pytest capture)")
            continue
        try:
            if "tmp_path" in args:
                with tempfile.TemporaryDirectory() as tmp:
                    fn(Path(tmp))
            else:
                fn()
            logger.info(f"✅ {name}")
        except Exception as e:
            failed += 1
            logger.error(f"❌ {name}: {e}")
    return failed == 0


if __name__ == "__main__":
    success = main_runner()
    if not success:
        exit(1)
