"""
Protocol Module

Dataset registry, splits, batch sampling, the training loop and the
generalization suite.
"""

from eyeseg_dg.protocol.registry import DatasetRegistry, build_registry, holdout_validation, split_dataset
from eyeseg_dg.protocol.sampling import BatchSampler, sample_batch
from eyeseg_dg.protocol.suite import (
    RunSpec,
    TestKind,
    TestResult,
    execute_suite,
    plan_runs,
    run_generalization_suite,
    run_matrix,
)
from eyeseg_dg.protocol.trainer import TrainConfig, TrainingResult, select_best, train

__all__ = [
    "DatasetRegistry", "build_registry", "holdout_validation", "split_dataset", "BatchSampler",
    "sample_batch", "RunSpec", "TestKind", "TestResult", "execute_suite", "plan_runs",
    "run_generalization_suite", "run_matrix", "TrainConfig", "TrainingResult", "select_best", "train",
]
