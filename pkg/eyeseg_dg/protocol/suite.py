"""
Generalization Suite

Plans and executes the four test kinds (within-dataset, cross-dataset,
all-vs-one, leave-one-out) over a registry. Runs that share a training set
share one training: it happens once, in the first run directory that needs it,
and the other runs record the reuse and evaluate its best checkpoint.

Results layout:
    <out>/<target>/<run-id>/checkpoints/, events.jsonl, metrics.csv,
                           config-echo.yaml, result.json (or reuse.json)
"""

import enum
import json
import logging
import os
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, FrozenSet, List, Optional, Sequence, Tuple

from eyeseg_dg.analysis.metrics import MetricRecord
from eyeseg_dg.analysis.report import METRICS_FIELDS
from eyeseg_dg.model.network import ModelConfig
from eyeseg_dg.protocol.registry import DatasetRegistry, holdout_validation
from eyeseg_dg.protocol.trainer import (
    EVENTS_FILE,
    TrainConfig,
    TrainingResult,
    evaluate,
    load_trained_model,
    train,
)
from eyeseg_dg.utils.config import dump_config
from eyeseg_dg.utils.errors import ConfigError, LeakageError
from eyeseg_dg.utils.io import atomic_write_text, read_jsonl, save_to_csv

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
CONFIG_ECHO_FILE = "config-echo.yaml"


class TestKind(str, enum.Enum):
    __test__ = False

    WITHIN = "within_dataset"
    CROSS = "cross_dataset"
    ALL_VS_ONE = "all_vs_one"
    LEAVE_ONE_OUT = "leave_one_out"


@dataclass(frozen=True)
class RunSpec:
    """One (training set, evaluation domain) pair of the suite"""
    kind: TestKind
    target: str
    train_domains: Tuple[str, ...]
    augment: bool = False
    normalization: str = "instance"

    @property
    def training_key(self) -> str:
        suffix = ("__bn" if self.normalization == "batch" else "") + ("__aug" if self.augment else "")
        return "+".join(self.train_domains) + suffix

    @property
    def run_id(self) -> str:
        return f"{self.kind.value}__{self.training_key}"

    def run_dir(self, out_dir: str) -> str:
        return os.path.join(out_dir, self.target, self.run_id)


@dataclass
class TestResult:
    __test__ = False
    run_id: str
    test_kind: str
    train_domains: Tuple[str, ...]
    eval_domain: str
    records: List[MetricRecord] = field(default_factory=list)
    checkpoint: str = ""
    augment: bool = False

    def rows(self) -> List[Dict[str, Any]]:
        base = {"run_id": self.run_id, "test_kind": self.test_kind,
                "train_domains": "+".join(self.train_domains), "eval_domain": self.eval_domain}
        return [{**base, **r.to_dict()} for r in self.records]


def plan_runs(registry: DatasetRegistry, kind: TestKind, target: str, augment: bool = False,
              normalization: str = "instance") -> List[RunSpec]:
    """
    Training-set composition of one test kind for one target

    Raises:
        ConfigError: Unknown target, or no source domain for cross/leave-one-out
    """
    kind = TestKind(kind)
    if target not in registry:
        raise ConfigError(f"Target '{target}' is not registered (known: {', '.join(registry.names())})")
    names = registry.names()
    others = [n for n in names if n != target]
    if kind is TestKind.WITHIN:
        sets = [(target,)]
    elif kind is TestKind.ALL_VS_ONE:
        sets = [tuple(names)]
    elif not others:
        raise ConfigError(f"{kind.value} for {target} needs at least one other registered domain")
    elif kind is TestKind.CROSS:
        sets = [(n,) for n in others]
    else:
        sets = [tuple(others)]
    return [RunSpec(kind, target, s, augment, normalization) for s in sets]


def run_matrix(registry: DatasetRegistry, config: Dict[str, Any]) -> List[RunSpec]:
    """Every run of the configured suite, ordered by target, arm and kind"""
    suite = config["suite"]
    targets = list(suite["targets"]) or registry.names()
    normalization = config["train"]["normalization"]
    runs = []
    for target in targets:
        for augment in suite["augmentation"]:
            for kind in suite["kinds"]:
                runs.extend(plan_runs(registry, TestKind(kind), target, bool(augment), normalization))
    return runs


def forbidden_sample_ids(registry: DatasetRegistry) -> FrozenSet[str]:
    """Test-split ids of every registered domain"""
    return frozenset(s.sample_id for entry in registry for s in entry.test)


def check_leakage(run_dir: str, forbidden_ids: FrozenSet[str]) -> int:
    """
    Audit a run's event log for test samples in training or validation

    Returns:
        int: Number of logged batch entries checked

    Raises:
        LeakageError: If any logged id belongs to a test split
    """
    checked = 0
    for event in read_jsonl(os.path.join(run_dir, EVENTS_FILE)):
        if event["type"] == "setup":
            ids = event["train_ids"] + event["val_ids"]
        elif event["type"] in ("iteration", "skip"):
            ids = event["batch"]
        else:
            continue
        leaked = [i for i in ids if i in forbidden_ids]
        if leaked:
            raise LeakageError(f"{run_dir}: {len(leaked)} test sample(s) in {event['type']} record, "
                               f"e.g. {leaked[0]}")
        checked += len(ids)
    return checked


def _train_job(model_cfg: ModelConfig, train_domains, val_domains, cfg: TrainConfig, run_dir: str,
               resume: bool, forbidden_ids: FrozenSet[str]) -> TrainingResult:
    return train(model_cfg, train_domains, val_domains, cfg, run_dir, resume, forbidden_ids)


def _write_run_files(run: RunSpec, run_dir: str, config: Dict[str, Any], result: TestResult,
                     trained_in: Optional[str]) -> None:
    os.makedirs(run_dir, exist_ok=True)
    atomic_write_text(os.path.join(run_dir, CONFIG_ECHO_FILE), dump_config(config))
    save_to_csv(result.rows(), os.path.join(run_dir, METRICS_FILE), METRICS_FIELDS)
    summary = {"run_id": run.run_id, "test_kind": run.kind.value, "target": run.target,
               "train_domains": list(run.train_domains), "augment": run.augment,
               "normalization": run.normalization, "checkpoint": result.checkpoint,
               "images": len(result.records)}
    atomic_write_text(os.path.join(run_dir, "result.json"), json.dumps(summary, sort_keys=True, indent=2) + "\n")
    if trained_in is not None:
        atomic_write_text(os.path.join(run_dir, "reuse.json"),
                          json.dumps({"trained_in": trained_in}, sort_keys=True, indent=2) + "\n")


def execute_runs(registry: DatasetRegistry, runs: Sequence[RunSpec], config: Dict[str, Any], out_dir: str,
                 jobs: int = 1, resume: bool = False) -> List[TestResult]:
    """
    Train every distinct training set once, then evaluate each run on its target

    Args:
        registry: Registered domains
        runs: Planned runs (see run_matrix)
        config: Merged experiment configuration
        out_dir: Results directory of the experiment
        jobs: Parallel training processes
        resume: Continue interrupted trainings from their latest checkpoint

    Returns:
        List of TestResult, one per run, in plan order

    Raises:
        LeakageError: If a test sample reached any training or validation batch
    """
    seed = int(config["seed"])
    model_cfg = ModelConfig.from_config(config)
    model_cfg.validate()
    forbidden = forbidden_sample_ids(registry)

    trainings: "OrderedDict[str, RunSpec]" = OrderedDict()
    for run in runs:
        trainings.setdefault(run.training_key, run)
    logger.info(f"{len(runs)} run(s), {len(trainings)} distinct training set(s)")

    jobs_args = []
    for key, owner in trainings.items():
        splits = [registry[name].train for name in owner.train_domains]
        kept, held = holdout_validation(splits, float(config["train"]["validation_fraction"]), seed)
        cfg = TrainConfig.from_config(config, augment=owner.augment)
        run_dir = owner.run_dir(out_dir)
        os.makedirs(run_dir, exist_ok=True)
        atomic_write_text(os.path.join(run_dir, CONFIG_ECHO_FILE), dump_config(config))
        jobs_args.append((model_cfg, kept, held, cfg, run_dir, resume, forbidden))

    results: Dict[str, TrainingResult] = {}
    if jobs > 1 and len(jobs_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_train_job, *args) for args in jobs_args]
            for key, future in zip(trainings, futures):
                results[key] = future.result()
    else:
        for key, args in zip(trainings, jobs_args):
            results[key] = _train_job(*args)

    for key, training in results.items():
        checked = check_leakage(training.run_dir, forbidden)
        logger.info(f"Leakage audit {os.path.relpath(training.run_dir, out_dir)}: {checked} ids, none leaked")

    out = []
    models = {}
    for run in runs:
        training = results[run.training_key]
        if run.training_key not in models:
            models[run.training_key] = load_trained_model(training)
        model = models[run.training_key]
        test_split = registry[run.target].test
        records = evaluate(model, list(test_split), int(config["train"]["eval_batch_size"]))
        run_dir = run.run_dir(out_dir)
        checkpoint = os.path.relpath(os.path.join(training.run_dir, training.best.path), out_dir)
        result = TestResult(run.run_id, run.kind.value, run.train_domains, run.target, records,
                            checkpoint, run.augment)
        trained_in = None
        if os.path.abspath(training.run_dir) != os.path.abspath(run_dir):
            trained_in = os.path.relpath(training.run_dir, out_dir)
        _write_run_files(run, run_dir, config, result, trained_in)
        logger.info(f"Evaluated {run.run_id} on {run.target}: {len(records)} test images")
        out.append(result)
    return out


def run_generalization_suite(registry: DatasetRegistry, kind: TestKind, target: str, config: Dict[str, Any],
                             out_dir: str, augment: bool = False, jobs: int = 1,
                             resume: bool = False) -> List[TestResult]:
    """One test kind for one target domain"""
    runs = plan_runs(registry, kind, target, augment, config["train"]["normalization"])
    return execute_runs(registry, runs, config, out_dir, jobs, resume)


def execute_suite(registry: DatasetRegistry, config: Dict[str, Any], out_dir: str, jobs: int = 1,
                  resume: bool = False) -> List[TestResult]:
    """The whole configured matrix"""
    return execute_runs(registry, run_matrix(registry, config), config, out_dir, jobs, resume)


def describe_matrix(runs: Sequence[RunSpec]) -> List[str]:
    """Human-readable run plan, one line per run"""
    owners: Dict[str, str] = {}
    lines = []
    for run in runs:
        owner = owners.setdefault(run.training_key, run.run_id + "@" + run.target)
        reuse = "" if owner == run.run_id + "@" + run.target else f"  (reuses {owner})"
        lines.append(f"{run.target:<12} {run.kind.value:<15} train={'+'.join(run.train_domains)}"
                     f"{' [aug]' if run.augment else ''}{reuse}")
    return lines
