#!/usr/bin/env python3
"""
Test script for benchmark-scale behavior

Full-resolution training runs, the reduced model, the generalization ordering
on the stock domains and the augmentation kind frequencies at scale. Every
test here is marked slow; run them with ``pytest -m slow test_benchmark.py``.
"""

import logging
import math
import os
from collections import Counter

import numpy as np
import pytest

from eyeseg_dg.analysis.metrics import mean_metrics
from eyeseg_dg.analysis.report import compare_tests, load_results
from eyeseg_dg.augment.pipeline import KINDS, apply_random
from eyeseg_dg.model.network import ModelConfig, parameter_count
from eyeseg_dg.protocol.registry import build_registry, holdout_validation
from eyeseg_dg.protocol.suite import execute_suite
from eyeseg_dg.protocol.trainer import TrainConfig, evaluate, load_trained_model, train
from eyeseg_dg.synth.domains import load_domain_specs, make_domain
from eyeseg_dg.utils.config import load_config

# Set up logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s [%(levelname)s] %(name)s: %(message)s')
logger = logging.getLogger(__name__)

SEEDS = (7, 8, 9)
ITERATIONS = 2000


def benchmark_config(seed, preset="default", **registry):
    config = load_config()
    config["seed"] = seed
    config["model"]["preset"] = preset
    config["train"].update({"max_iterations": ITERATIONS, "eval_every": 250})
    config["registry"].update(registry)
    return config


def single_domain_error(tmp_path, seed, preset="default"):
    """Test-split mean pupil error of a lab_a-only training"""
    config = benchmark_config(seed, preset, include=["lab_a"])
    registry = build_registry(config)
    kept, held = holdout_validation([registry["lab_a"].train], 0.2, seed)
    model_cfg = ModelConfig.from_config(config)
    result = train(model_cfg, kept, held, TrainConfig.from_config(config), str(tmp_path / f"{preset}-{seed}"))
    records = evaluate(load_trained_model(result), list(registry["lab_a"].test))
    error = mean_metrics(records)["e_p"]
    logger.info(f"{preset} model, seed {seed}: test pupil error {error:.2f} px")
    return error


@pytest.mark.slow
def test_training_reaches_pixel_accuracy(tmp_path):
    errors = [single_domain_error(tmp_path, seed) for seed in SEEDS]
    assert sum(e < 3.0 for e in errors) >= 2, errors


@pytest.mark.slow
def test_compact_model_still_converges(tmp_path):
    default = ModelConfig.from_config(benchmark_config(SEEDS[0]))
    compact = ModelConfig.from_config(benchmark_config(SEEDS[0], "compact"))
    assert parameter_count(default)["total"] >= 3 * parameter_count(compact)["total"]
    errors = [single_domain_error(tmp_path, seed, "compact") for seed in SEEDS]
    assert sum(e < 5.0 for e in errors) >= 2, errors


def ordering_holds(out_dir):
    """Outdoors target favors pooling, the well-sampled lab target does not, the sparse one gains from all data"""
    results = load_results(out_dir)
    verdicts = {target: compare_tests([r for r in results if r.eval_domain == target])
                for target in ("field_a", "lab_a", "lab_c")}
    checks = {
        "field_a": verdicts["field_a"]["H1"]["verdict"] == "multiset",
        "lab_a": verdicts["lab_a"]["H1"]["verdict"] == "dataset-specific",
        "lab_c": verdicts["lab_c"]["H2"]["gap"] > 0.0,
    }
    logger.info(f"{out_dir}: {checks}")
    return all(checks.values())


@pytest.mark.slow
@pytest.mark.parametrize("preset", ["default", "compact"])
def test_generalization_ordering_on_stock_domains(tmp_path, preset):
    held = 0
    for seed in SEEDS:
        config = benchmark_config(seed, preset)
        config["suite"]["targets"] = ["field_a", "lab_a", "lab_c"]
        out_dir = os.path.join(str(tmp_path), f"{preset}-{seed}")
        execute_suite(build_registry(config), config, out_dir, jobs=min(4, os.cpu_count() or 1))
        held += ordering_holds(out_dir)
    assert held >= 2


@pytest.mark.slow
def test_kind_frequencies_at_scale():
    spec = next(s for s in load_domain_specs("stock") if s.name == "lab_a")
    sample = make_domain(spec, 1, height=24, width=32)[0]
    rng = np.random.default_rng(0)
    draws = 110_000
    counts = Counter(apply_random(sample, rng)[1].kind for _ in range(draws))
    expected = draws / len(KINDS)
    sigma = math.sqrt(draws * (1 / len(KINDS)) * (1 - 1 / len(KINDS)))
    assert set(counts) == set(KINDS)
    for kind, count in counts.items():
        assert abs(count - expected) <= 3 * sigma, (kind, count)


def main():
    """Main function"""
    import tempfile
    from pathlib import Path

    logger.info("Starting benchmark tests")
    tests = [(name, fn) for name, fn in globals().items() if name.startswith("test_") and callable(fn)]
    failed = 0
    for name, fn in tests:
        args = fn.__code__.co_varnames[:fn.__code__.co_argcount]
        try:
            if "preset" in args:
                with tempfile.TemporaryDirectory() as tmp:
                    fn(Path(tmp), "default")
            elif "tmp_path" in args:
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
    success = main()
    if not success:
        exit(1)
