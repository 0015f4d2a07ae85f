#!/usr/bin/env python3
"""
Test script for the evaluation protocol

Subject-disjoint splits, validation holdout, per-domain batch quotas, run
planning, checkpoint selection, training resume and the end-to-end suite.
"""

import logging
import os

import numpy as np
import pytest

from eyeseg_dg.analysis.report import compare_tests, emit_report, load_results
from eyeseg_dg.model.network import ModelConfig
from eyeseg_dg.protocol.registry import DatasetRegistry, build_registry, holdout_validation, split_dataset
from eyeseg_dg.protocol.sampling import BatchSampler, domain_quota, iterations_per_epoch, sample_batch
from eyeseg_dg.protocol.suite import (
    RunSpec,
    TestKind,
    check_leakage,
    describe_matrix,
    execute_suite,
    forbidden_sample_ids,
    plan_runs,
    run_generalization_suite,
    run_matrix,
)
from eyeseg_dg.protocol.trainer import (
    CheckpointRecord,
    TrainConfig,
    load_trained_model,
    predict_masks,
    read_training,
    select_best,
    selection_score,
    train,
)
from eyeseg_dg.synth.domains import DomainSpec, load_domain_specs, make_domain
from eyeseg_dg.synth.stats import domain_stats
from eyeseg_dg.tensor.checkpoint import load_checkpoint
from eyeseg_dg.utils.config import load_config
from eyeseg_dg.utils.errors import ConfigError, IntegrityError, LeakageError, MetricError, MissingInputError, SplitError
from eyeseg_dg.utils.io import read_jsonl, write_jsonl

# Set up logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s [%(levelname)s] %(name)s: %(message)s')
logger = logging.getLogger(__name__)

HEIGHT, WIDTH = 24, 32


def domain(name, subjects=4, images=2, **kwargs):
    return make_domain(DomainSpec(name=name, subjects=subjects, **kwargs), images, height=HEIGHT, width=WIDTH)


def stock(name, images=2):
    spec = next(s for s in load_domain_specs("stock") if s.name == name)
    return make_domain(spec, images, height=HEIGHT, width=WIDTH)


def registry_of(*names):
    registry = DatasetRegistry(HEIGHT, WIDTH)
    for name in names:
        registry.add(domain(name))
    return registry


def tiny_config(tmp_path):
    config = load_config()
    config["experiment"] = "tiny"
    config["registry"].update({"height": HEIGHT, "width": WIDTH, "images_per_subject": 4,
                               "include": ["lab_a", "lab_c"]})
    config["suite"]["targets"] = ["lab_a"]
    config["train"].update({"max_iterations": 2, "eval_every": 1, "eval_batch_size": 8})
    config["model"].update({"base_channels": 4, "growth": 1.0, "blocks": 2, "regression_head": False})
    config["output"]["runs_dir"] = str(tmp_path)
    return config


# ===================== splits =====================

def test_subject_split_is_disjoint_and_deterministic():
    dataset = domain("ten", subjects=10)
    train_a, test_a = split_dataset(dataset, 0.3, seed=5)
    train_b, test_b = split_dataset(dataset, 0.3, seed=5)
    assert len(test_a.subjects()) == 3
    assert not set(train_a.subjects()) & set(test_a.subjects())
    assert test_a.sample_ids() == test_b.sample_ids()
    assert len(train_a) + len(test_a) == len(dataset)
    assert train_a.sample_ids() == train_b.sample_ids()


def test_split_keeps_both_sides_non_empty():
    train_split, test_split = split_dataset(domain("pair", subjects=2), 0.9)
    assert len(train_split.subjects()) == 1 and len(test_split.subjects()) == 1


def test_single_subject_cannot_be_split():
    with pytest.raises(SplitError):
        split_dataset(domain("solo", subjects=1), 0.25)


def test_image_split_policy():
    train_split, test_split = split_dataset(domain("img", subjects=2, images=5), 0.3, policy="image")
    assert len(test_split) == 3 and len(train_split) == 7


def test_holdout_is_stratified_per_domain():
    kept, held = holdout_validation([domain("big", subjects=4, images=25), domain("small", subjects=2, images=5)],
                                    0.2, seed=3)
    assert [len(d) for d in kept] == [80, 8]
    assert [len(d) for d in held] == [20, 2]
    assert not set(kept[0].sample_ids()) & set(held[0].sample_ids())


def test_registry_rejects_resolution_mismatch():
    registry = DatasetRegistry(HEIGHT, WIDTH)
    with pytest.raises(IntegrityError):
        registry.add(make_domain(DomainSpec(name="big"), 1))


def test_build_registry_include_filter():
    config = load_config()
    config["registry"].update({"height": HEIGHT, "width": WIDTH, "images_per_subject": 1,
                               "include": ["lab_a", "field_c"]})
    registry = build_registry(config)
    assert registry.names() == ["lab_a", "field_c"]
    config["registry"]["include"] = ["nowhere"]
    with pytest.raises(ConfigError):
        build_registry(config)


# ===================== sampling =====================

def test_quota_depends_on_domain_count():
    assert domain_quota(1) == 24
    assert domain_quota(3) == 3


def test_multiset_batch_takes_quota_from_each_domain():
    domains = [domain("d1"), domain("d2"), domain("d3")]
    sampler = BatchSampler(domains, 3, seed=1)
    for it in range(5):
        batch = sampler.batch(it)
        assert len(batch) == 9
        assert [s.domain for s in batch] == ["d1"] * 3 + ["d2"] * 3 + ["d3"] * 3


def test_single_domain_batch_size():
    sampler = BatchSampler([domain("one", subjects=4, images=10)], domain_quota(1), seed=1)
    assert len(sampler.batch(0)) == 24


def test_no_repeats_within_an_epoch():
    d = domain("ten", subjects=5, images=2)
    sampler = BatchSampler([d], 3, seed=2)
    drawn = [s.sample_id for it in range(4) for s in sampler.batch(it)]
    assert len(set(drawn[:10])) == 10
    assert sorted(drawn[:10]) == sorted(d.sample_ids())


def test_batches_are_pure_functions_of_iteration():
    domains = [domain("d1"), domain("d2")]
    a = BatchSampler(domains, 3, seed=4)
    b = BatchSampler(domains, 3, seed=4)
    assert [s.sample_id for s in a.batch(7)] == [s.sample_id for s in b.batch(7)]


def test_sample_batch_matches_sampler():
    domains = [domain("d1"), domain("d2"), domain("d3")]
    sampler = BatchSampler(domains, 3, seed=4)
    for it in (0, 5, 11):
        drawn = [s.sample_id for s in sample_batch(domains, 3, it, seed=4)]
        assert drawn == [s.sample_id for s in sampler.batch(it)]


def test_iterations_per_epoch_follows_largest_domain():
    assert iterations_per_epoch([domain("a", images=5), domain("b", images=1)], 3) == 7


def test_empty_domain_rejected():
    d = domain("a")
    with pytest.raises(SplitError):
        BatchSampler([d.subset([])], 3, seed=0)


# ===================== run planning =====================

def test_plan_runs_per_kind():
    registry = registry_of("a", "b", "c")
    assert [r.train_domains for r in plan_runs(registry, TestKind.WITHIN, "b")] == [("b",)]
    assert [r.train_domains for r in plan_runs(registry, TestKind.CROSS, "b")] == [("a",), ("c",)]
    assert [r.train_domains for r in plan_runs(registry, TestKind.ALL_VS_ONE, "b")] == [("a", "b", "c")]
    assert [r.train_domains for r in plan_runs(registry, TestKind.LEAVE_ONE_OUT, "b")] == [("a", "c")]


def test_plan_runs_rejects_unknown_target_and_lonely_registry():
    registry = registry_of("a")
    with pytest.raises(ConfigError):
        plan_runs(registry, TestKind.WITHIN, "zzz")
    with pytest.raises(ConfigError):
        plan_runs(registry, TestKind.LEAVE_ONE_OUT, "a")
    with pytest.raises(ConfigError):
        plan_runs(registry, TestKind.CROSS, "a")


def test_run_identity():
    run = RunSpec(TestKind.LEAVE_ONE_OUT, "b", ("a", "c"), augment=True, normalization="batch")
    assert run.training_key == "a+c__bn__aug"
    assert run.run_id == "leave_one_out__a+c__bn__aug"
    assert run.run_dir("out") == os.path.join("out", "b", "leave_one_out__a+c__bn__aug")


def test_run_matrix_and_description():
    registry = registry_of("a", "b")
    config = load_config()
    config["suite"]["augmentation"] = [False, True]
    runs = run_matrix(registry, config)
    # per target and arm: within 1, cross 1, all-vs-one 1, leave-one-out 1
    assert len(runs) == 2 * 2 * 4
    lines = describe_matrix(runs)
    assert len(lines) == len(runs)
    assert any("reuses" in line for line in lines)


def test_forbidden_ids_cover_every_test_split():
    registry = registry_of("a", "b")
    forbidden = forbidden_sample_ids(registry)
    assert forbidden == frozenset(registry["a"].test.sample_ids() + registry["b"].test.sample_ids())


# ===================== checkpoint selection =====================

def test_selection_score_endpoints():
    assert selection_score({"miou": 1.0, "e_p": 0.0, "e_i": 0.0}, 72, 96) == 1.0
    assert selection_score({"miou": None, "e_p": 72.0, "e_i": None}, 72, 96) == 0.0
    assert selection_score({"miou": 0.5, "e_p": 0.0, "e_i": 36.0}, 72, 96, "two_term") == pytest.approx(1.0)
    with pytest.raises(MetricError):
        selection_score({"miou": None, "e_p": None, "e_i": None}, 72, 96)


def test_select_best_prefers_earliest_on_ties():
    records = [CheckpointRecord(1, "a", {}, 0.5), CheckpointRecord(2, "b", {}, 0.7), CheckpointRecord(3, "c", {}, 0.7)]
    assert select_best(records).iteration == 2


# ===================== training =====================

def tiny_training(tmp_path, name, **kwargs):
    model_cfg = ModelConfig(base_channels=4, growth=1.0, blocks=2, height=HEIGHT, width=WIDTH,
                            regression_head=True)
    kept, held = holdout_validation([stock("lab_a"), stock("lab_b")], 0.2, seed=7)
    cfg = TrainConfig(max_iterations=4, eval_every=2, seed=7, **kwargs)
    run_dir = str(tmp_path / name)
    return model_cfg, kept, held, cfg, run_dir


def test_training_writes_checkpoints_and_events(tmp_path):
    model_cfg, kept, held, cfg, run_dir = tiny_training(tmp_path, "plain", augment=True)
    result = train(model_cfg, kept, held, cfg, run_dir)
    assert [c.iteration for c in result.checkpoints] == [2, 4]
    assert result.best in result.checkpoints
    events = read_jsonl(os.path.join(run_dir, "events.jsonl"))
    assert events[0]["type"] == "setup"
    iterations = [e for e in events if e["type"] == "iteration"]
    assert len(iterations) == 4
    assert all(len(e["batch"]) == 6 for e in iterations)
    assert all(e["augment"][0]["event"] is not None for e in iterations)


def test_resume_reproduces_uninterrupted_run(tmp_path):
    model_cfg, kept, held, cfg, run_dir = tiny_training(tmp_path, "resume")
    train(model_cfg, kept, held, cfg, run_dir)
    final = os.path.join(run_dir, "checkpoints", "iter-000004.egb")
    reference = load_checkpoint(final)
    os.remove(final)

    resumed = train(model_cfg, kept, held, cfg, run_dir, resume=True)
    again = load_checkpoint(final)
    assert list(again) == list(reference)
    for key in reference:
        assert np.array_equal(again[key], reference[key]), key
    assert [c.iteration for c in resumed.checkpoints] == [2, 4]
    events = read_jsonl(os.path.join(run_dir, "events.jsonl"))
    assert [e["iteration"] for e in events if e["type"] == "iteration"] == [0, 1, 2, 3]


def test_training_refuses_forbidden_samples(tmp_path):
    model_cfg, kept, held, cfg, run_dir = tiny_training(tmp_path, "leak")
    forbidden = frozenset([kept[0].sample_ids()[0]])
    with pytest.raises(LeakageError):
        train(model_cfg, kept, held, cfg, run_dir, forbidden_ids=forbidden)


def test_leakage_audit_reads_event_log(tmp_path):
    run_dir = str(tmp_path)
    write_jsonl(os.path.join(run_dir, "events.jsonl"), [
        {"type": "setup", "train_ids": ["a/000/0000"], "val_ids": ["a/000/0001"]},
        {"type": "iteration", "iteration": 0, "batch": ["a/000/0000", "a/002/0000"]},
    ])
    with pytest.raises(LeakageError):
        check_leakage(run_dir, frozenset(["a/002/0000"]))
    assert check_leakage(run_dir, frozenset(["b/000/0000"])) == 4


def test_read_training_restores_selection(tmp_path):
    model_cfg, kept, held, cfg, run_dir = tiny_training(tmp_path, "reload")
    result = train(model_cfg, kept, held, cfg, run_dir)
    loaded = read_training(run_dir)
    assert loaded.model_cfg == model_cfg
    assert loaded.iterations == 4
    assert [c.iteration for c in loaded.checkpoints] == [c.iteration for c in result.checkpoints]
    assert loaded.best.iteration == result.best.iteration
    assert loaded.best.path == result.best.path
    with pytest.raises(MissingInputError):
        read_training(str(tmp_path / "nowhere"))


def test_predicted_masks_fill_centers_only_domains(tmp_path):
    model_cfg, kept, held, cfg, run_dir = tiny_training(tmp_path, "masks")
    train(model_cfg, kept, held, cfg, run_dir)
    model = load_trained_model(read_training(run_dir))

    lab_c = stock("lab_c")
    assert domain_stats(lab_c).iris_fraction_mean is None
    masks = predict_masks(model, list(lab_c))
    assert sorted(masks) == sorted(lab_c.sample_ids())
    assert all(m.shape == (HEIGHT, WIDTH) and m.max() <= 2 for m in masks.values())

    stats = domain_stats(lab_c, masks)
    assert stats.mask_source == "prediction"
    assert stats.iris_fraction_mean is not None
    assert 0.0 <= stats.iris_fraction_mean <= 1.0

    # annotated samples keep their ground truth
    assert predict_masks(model, list(stock("lab_a"))) == {}


# ===================== suites =====================

def test_single_test_kind_suite(tmp_path):
    config = tiny_config(tmp_path)
    registry = build_registry(config)
    out_dir = os.path.join(str(tmp_path), "single")
    results = run_generalization_suite(registry, TestKind.WITHIN, "lab_a", config, out_dir)
    assert [r.run_id for r in results] == ["within_dataset__lab_a"]
    assert results[0].records
    assert os.path.exists(os.path.join(out_dir, "lab_a", "within_dataset__lab_a", "metrics.csv"))


def test_suite_rerun_is_byte_identical(tmp_path):
    config = tiny_config(tmp_path)
    registry = build_registry(config)
    first = os.path.join(str(tmp_path), "first")
    second = os.path.join(str(tmp_path), "second")
    runs_a = execute_suite(registry, config, first)
    execute_suite(build_registry(config), config, second)
    for run in runs_a:
        relative = os.path.join("lab_a", run.run_id, "metrics.csv")
        with open(os.path.join(first, relative), "rb") as a, open(os.path.join(second, relative), "rb") as b:
            assert a.read() == b.read(), relative


# ===================== end to end =====================

@pytest.mark.slow
def test_suite_end_to_end(tmp_path):
    config = tiny_config(tmp_path)
    registry = build_registry(config)
    out_dir = os.path.join(str(tmp_path), "tiny")
    results = execute_suite(registry, config, out_dir)
    assert [r.test_kind for r in results] == [k.value for k in TestKind]
    assert all(r.eval_domain == "lab_a" for r in results)

    # cross-dataset and leave-one-out share the lab_c training
    loo_dir = os.path.join(out_dir, "lab_a", "leave_one_out__lab_c")
    assert os.path.exists(os.path.join(loo_dir, "reuse.json"))
    assert not os.path.exists(os.path.join(loo_dir, "events.jsonl"))
    reused = read_training(loo_dir)
    assert os.path.basename(reused.run_dir) == "cross_dataset__lab_c"
    for r in results:
        run_dir = os.path.join(out_dir, "lab_a", r.run_id)
        for name in ("metrics.csv", "config-echo.yaml", "result.json"):
            assert os.path.exists(os.path.join(run_dir, name))

    loaded = load_results(out_dir)
    assert {r.run_id for r in loaded} == {r.run_id for r in results}
    verdicts = compare_tests(loaded)
    assert verdicts["baseline"]["run_id"] == "within_dataset__lab_a"
    summary = emit_report(loaded, os.path.join(out_dir, "report"))
    assert "lab_a" in summary["domains"]


def main():
    """Main function"""
    import tempfile
    from pathlib import Path

    logger.info("Starting protocol tests")
    tests = [(name, fn) for name, fn in globals().items() if name.startswith("test_") and callable(fn)]
    failed = 0
    for name, fn in tests:
        try:
            if "tmp_path" in fn.__code__.co_varnames[:fn.__code__.co_argcount]:
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
