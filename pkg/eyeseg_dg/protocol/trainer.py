"""
Training Loop

Sample -> flip -> augment -> forward -> loss -> ADAM, with validation and a
checkpoint every ``eval_every`` iterations. Every random decision derives from
(seed, iteration, slot), so resuming from a checkpoint reproduces the
uninterrupted run.

Run directory:
    checkpoints/iter-NNNNNN.egb   parameters, buffers, ADAM moments, loop state
    checkpoints/model.json        model configuration
    events.jsonl                  setup, per-iteration and evaluation records
"""

import glob
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from eyeseg_dg.analysis.metrics import MetricRecord, center_error, mean_metrics, miou
from eyeseg_dg.augment.pipeline import AugmentSettings, augment_sample
from eyeseg_dg.model.loss import collate, ellseg_loss
from eyeseg_dg.model.network import (
    DenseEllipseNet,
    ModelConfig,
    build_model,
    load_state,
    model_manifest,
    state_arrays,
)
from eyeseg_dg.protocol.sampling import BatchSampler, domain_quota, iterations_per_epoch
from eyeseg_dg.synth.domains import DomainDataset, EyeSample, derive_seed
from eyeseg_dg.tensor.autodiff import Tensor, no_grad
from eyeseg_dg.tensor.checkpoint import load_checkpoint, save_checkpoint
from eyeseg_dg.tensor.optim import AdamState, adam_step
from eyeseg_dg.utils.errors import LeakageError, MetricError, MissingInputError, TrainingAborted
from eyeseg_dg.utils.io import append_jsonl, atomic_write_text, read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

CHECKPOINT_DIR = "checkpoints"
EVENTS_FILE = "events.jsonl"
MODEL_FILE = "model.json"
REUSE_FILE = "reuse.json"


@dataclass
class TrainConfig:
    epochs: int = 20
    max_iterations: int = 0
    eval_every: int = 200
    multiset_quota: int = 3
    single_quota: int = 24
    validation_fraction: float = 0.2
    augment: bool = False
    seed: int = 7
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss_weights: Dict[str, float] = field(default_factory=lambda: {"seg": 1.0, "center": 1.0, "ellipse": 0.5})
    selection_score: str = "three_term"
    max_nonfinite: int = 3
    eval_batch_size: int = 32
    augment_settings: AugmentSettings = field(default_factory=AugmentSettings)

    @classmethod
    def from_config(cls, config: Dict[str, Any], augment: bool = False) -> "TrainConfig":
        train = config["train"]
        opt = train["optimizer"]
        return cls(
            epochs=int(train["epochs"]),
            max_iterations=int(train["max_iterations"]),
            eval_every=int(train["eval_every"]),
            multiset_quota=int(train["multiset_quota"]),
            single_quota=int(train["single_quota"]),
            validation_fraction=float(train["validation_fraction"]),
            augment=augment,
            seed=int(config["seed"]),
            lr=float(opt["lr"]),
            beta1=float(opt["beta1"]),
            beta2=float(opt["beta2"]),
            eps=float(opt["eps"]),
            loss_weights=dict(train["loss_weights"]),
            selection_score=train["selection_score"],
            max_nonfinite=int(train["max_nonfinite"]),
            eval_batch_size=int(train["eval_batch_size"]),
            augment_settings=AugmentSettings.from_config(config),
        )


@dataclass
class CheckpointRecord:
    iteration: int
    path: str
    metrics: Dict[str, Optional[float]]
    score: float

    def to_dict(self) -> Dict[str, Any]:
        return {"iteration": self.iteration, "checkpoint": self.path, "metrics": self.metrics, "score": self.score}


@dataclass
class TrainingResult:
    run_dir: str
    iterations: int
    checkpoints: List[CheckpointRecord]
    best: CheckpointRecord
    model_cfg: ModelConfig


# ===================== evaluation and selection =====================

def evaluate(model: DenseEllipseNet, samples: Sequence[EyeSample], batch_size: int = 32) -> List[MetricRecord]:
    """Per-image metrics; a metric is absent whenever its annotation is"""
    model.eval()
    dtype = np.dtype(model.cfg.dtype)
    records = []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            images = np.stack([s.image for s in chunk])[:, None].astype(dtype)
            out = model(Tensor(images))
            predicted = np.argmax(out.seg_logits.data, axis=1)
            for i, s in enumerate(chunk):
                records.append(MetricRecord(
                    sample_id=s.sample_id,
                    miou=miou(predicted[i], s.seg_mask) if s.seg_mask is not None else None,
                    e_p=center_error(tuple(out.pupil_center.data[i].tolist()), s.pupil_point()),
                    e_i=center_error(tuple(out.iris_center.data[i].tolist()), s.iris_point()),
                ))
    return records


def predict_masks(model: DenseEllipseNet, samples: Sequence[EyeSample], batch_size: int = 32) -> Dict[str, np.ndarray]:
    """Argmax SegMask per sample that ships without a ground-truth mask"""
    pending = [s for s in samples if s.seg_mask is None]
    model.eval()
    dtype = np.dtype(model.cfg.dtype)
    masks: Dict[str, np.ndarray] = {}
    with no_grad():
        for start in range(0, len(pending), batch_size):
            chunk = pending[start:start + batch_size]
            images = np.stack([s.image for s in chunk])[:, None].astype(dtype)
            predicted = np.argmax(model(Tensor(images)).seg_logits.data, axis=1).astype(np.uint8)
            for i, s in enumerate(chunk):
                masks[s.sample_id] = predicted[i]
    logger.debug(f"Predicted {len(masks)} mask(s) for {len(samples)} sample(s)")
    return masks


def selection_score(metrics: Dict[str, Optional[float]], height: int, width: int,
                    mode: str = "three_term") -> float:
    """
    Mean of the available terms among mIoU, d_p and d_i, with d = 1 - e / min(H, W)

    ``two_term`` averages mIoU with d_p + d_i instead.

    Raises:
        MetricError: If no term is available
    """
    alpha = 1.0 / min(height, width)
    d_p = None if metrics.get("e_p") is None else 1.0 - alpha * metrics["e_p"]
    d_i = None if metrics.get("e_i") is None else 1.0 - alpha * metrics["e_i"]
    m = metrics.get("miou")
    if mode == "two_term":
        terms = [m] if m is not None else []
        distances = [d for d in (d_p, d_i) if d is not None]
        if distances:
            terms.append(sum(distances))
    else:
        terms = [t for t in (m, d_p, d_i) if t is not None]
    if not terms:
        raise MetricError("No selection term is computable on the validation set")
    return float(np.mean(terms))


def select_best(checkpoints: Sequence[CheckpointRecord]) -> CheckpointRecord:
    """Highest validation score; ties go to the earliest checkpoint"""
    if not checkpoints:
        raise MetricError("No checkpoint to select from")
    best = checkpoints[0]
    for record in checkpoints[1:]:
        if record.score > best.score:
            best = record
    return best


# ===================== training =====================

class Trainer:
    """One training run: fixed model config, training and validation domains"""

    def __init__(self, model_cfg: ModelConfig, train_domains: Sequence[DomainDataset],
                 val_domains: Sequence[DomainDataset], cfg: TrainConfig, run_dir: str,
                 forbidden_ids: FrozenSet[str] = frozenset()):
        self.model_cfg = model_cfg
        self.train_domains = list(train_domains)
        self.val_samples = [s for d in val_domains for s in d]
        self.cfg = cfg
        self.run_dir = run_dir
        self.ckpt_dir = os.path.join(run_dir, CHECKPOINT_DIR)
        self.events_path = os.path.join(run_dir, EVENTS_FILE)
        self.forbidden_ids = forbidden_ids
        self.quota = domain_quota(len(self.train_domains), cfg.multiset_quota, cfg.single_quota)
        self.total_iterations = cfg.max_iterations or cfg.epochs * iterations_per_epoch(self.train_domains, self.quota)

    # ----- checkpoint state -----
    def _checkpoint_path(self, iteration: int) -> str:
        return os.path.join(self.ckpt_dir, f"iter-{iteration:06d}.egb")

    def _save(self, model: DenseEllipseNet, state: AdamState, iteration: int, nonfinite: int) -> str:
        arrays = state_arrays(model)
        for i, (m, v) in enumerate(zip(state.first_moment, state.second_moment)):
            arrays[f"adam.m.{i}"] = m
            arrays[f"adam.v.{i}"] = v
        arrays["state.iteration"] = np.array([iteration])
        arrays["state.adam_step"] = np.array([state.step_count])
        arrays["state.rejected"] = np.array([state.rejected_steps])
        arrays["state.nonfinite"] = np.array([nonfinite])
        path = self._checkpoint_path(iteration)
        save_checkpoint(path, arrays)
        return path

    def _restore(self, model: DenseEllipseNet, state: AdamState, path: str) -> Tuple[int, int]:
        arrays = load_checkpoint(path)
        load_state(model, arrays)
        params = model.parameters()
        if "adam.m.0" in arrays:
            state.first_moment = [arrays[f"adam.m.{i}"].astype(p.dtype) for i, p in enumerate(params)]
            state.second_moment = [arrays[f"adam.v.{i}"].astype(p.dtype) for i, p in enumerate(params)]
        state.step_count = int(arrays["state.adam_step"][0])
        state.rejected_steps = int(arrays["state.rejected"][0])
        return int(arrays["state.iteration"][0]), int(arrays["state.nonfinite"][0])

    def latest_checkpoint(self) -> Optional[str]:
        paths = sorted(glob.glob(os.path.join(self.ckpt_dir, "iter-*.egb")))
        return paths[-1] if paths else None

    # ----- leakage -----
    def _check_ids(self, ids: Sequence[str], where: str) -> None:
        leaked = sorted(set(ids) & self.forbidden_ids)
        if leaked:
            raise LeakageError(f"{len(leaked)} test sample(s) in {where}, e.g. {leaked[0]}")

    def _evaluate(self, model: DenseEllipseNet, iteration: int, path: str) -> CheckpointRecord:
        records = evaluate(model, self.val_samples, self.cfg.eval_batch_size)
        metrics = mean_metrics(records)
        score = selection_score(metrics, self.model_cfg.height, self.model_cfg.width, self.cfg.selection_score)
        model.train()
        return CheckpointRecord(iteration, os.path.relpath(path, self.run_dir), metrics, score)

    def run(self, resume: bool = False) -> TrainingResult:
        """
        Train, validate and checkpoint

        Args:
            resume: Continue from the latest checkpoint in the run directory

        Returns:
            TrainingResult: Checkpoint series with validation scores and the best one

        Raises:
            LeakageError: If a forbidden (test) sample reaches training or validation
            TrainingAborted: After ``max_nonfinite`` consecutive non-finite losses
        """
        cfg = self.cfg
        os.makedirs(self.ckpt_dir, exist_ok=True)
        atomic_write_text(os.path.join(self.ckpt_dir, MODEL_FILE), model_manifest(self.model_cfg))

        model = build_model(self.model_cfg, seed=derive_seed(cfg.seed, "model-init"))
        model.train()
        params = model.parameters()
        state = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
        sampler = BatchSampler(self.train_domains, self.quota, cfg.seed)

        train_ids = [s.sample_id for d in self.train_domains for s in d]
        val_ids = [s.sample_id for s in self.val_samples]
        self._check_ids(train_ids, "the training split")
        self._check_ids(val_ids, "the validation split")

        start, nonfinite, checkpoints = 0, 0, []
        latest = self.latest_checkpoint() if resume else None
        if latest is not None:
            start, nonfinite = self._restore(model, state, latest)
            kept = [e for e in read_jsonl(self.events_path)
                    if e["type"] == "setup" or (e["type"] == "eval" and e["iteration"] <= start)
                    or (e["type"] in ("iteration", "skip") and e["iteration"] < start)]
            write_jsonl(self.events_path, kept)
            checkpoints = [CheckpointRecord(e["iteration"], e["checkpoint"], e["metrics"], e["score"])
                           for e in kept if e["type"] == "eval"]
            logger.info(f"Resuming {self.run_dir} from iteration {start}")
        else:
            write_jsonl(self.events_path, [{
                "type": "setup",
                "train_ids": train_ids,
                "val_ids": val_ids,
                "quota": self.quota,
                "iterations": self.total_iterations,
                "augment": cfg.augment,
                "model": self.model_cfg.to_dict(),
            }])

        logger.info(f"Training {os.path.basename(self.run_dir)}: {self.total_iterations} iterations, "
                    f"{len(self.train_domains)} domain(s) x {self.quota} per batch")
        dtype = np.dtype(self.model_cfg.dtype)
        with open(self.events_path, "a") as log:
            for it in range(start, self.total_iterations):
                batch = sampler.batch(it)
                self._check_ids([s.sample_id for s in batch], f"the batch of iteration {it}")

                prepared, aug_records = [], []
                for slot, sample in enumerate(batch):
                    out_sample, record = augment_sample(sample, derive_seed(cfg.seed, "augment", it, slot),
                                                        cfg.augment, cfg.augment_settings)
                    prepared.append(out_sample)
                    aug_records.append(record)

                targets = collate(prepared, dtype)
                out = model(Tensor(targets.images))
                loss = ellseg_loss(out, targets, cfg.loss_weights)
                total = loss.total.item()

                if not np.isfinite(total):
                    nonfinite += 1
                    logger.warning(f"Iteration {it}: non-finite loss, step skipped ({nonfinite} consecutive)")
                    append_jsonl(log, {"type": "skip", "iteration": it, "reason": "non-finite loss",
                                       "consecutive": nonfinite, "batch": [s.sample_id for s in batch]})
                    if nonfinite >= cfg.max_nonfinite:
                        log.flush()
                        raise TrainingAborted(f"{nonfinite} consecutive non-finite losses at iteration {it} "
                                              f"in {self.run_dir}")
                else:
                    nonfinite = 0
                    model.zero_grad()
                    loss.total.backward()
                    applied = adam_step(params, [p.grad for p in params], state)
                    append_jsonl(log, {"type": "iteration", "iteration": it,
                                       "batch": [s.sample_id for s in batch],
                                       "augment": aug_records, "loss": loss.to_dict(), "applied": applied})

                done = it + 1
                if done % cfg.eval_every == 0 or done == self.total_iterations:
                    path = self._save(model, state, done, nonfinite)
                    record = self._evaluate(model, done, path)
                    checkpoints.append(record)
                    append_jsonl(log, {"type": "eval", **record.to_dict()})
                    log.flush()
                    logger.info(f"Iteration {done}/{self.total_iterations}: loss {total:.4f}, "
                                f"validation score {record.score:.4f}")

        best = select_best(checkpoints)
        logger.info(f"Best checkpoint: {best.path} (score {best.score:.4f})")
        return TrainingResult(self.run_dir, self.total_iterations, checkpoints, best, self.model_cfg)


def train(model_cfg: ModelConfig, train_domains: Sequence[DomainDataset], val_domains: Sequence[DomainDataset],
          cfg: TrainConfig, run_dir: str, resume: bool = False,
          forbidden_ids: FrozenSet[str] = frozenset()) -> TrainingResult:
    return Trainer(model_cfg, train_domains, val_domains, cfg, run_dir, forbidden_ids).run(resume)


def load_trained_model(result: TrainingResult, record: Optional[CheckpointRecord] = None) -> DenseEllipseNet:
    """Rebuild a model from one of a run's checkpoints (the best by default)"""
    record = record or result.best
    model = build_model(result.model_cfg)
    load_state(model, load_checkpoint(os.path.join(result.run_dir, record.path)))
    return model.eval()


def read_training(run_dir: str) -> TrainingResult:
    """
    Reload a finished training from its run directory

    A run that reused another run's training (reuse.json) resolves to the
    directory that holds the checkpoints.

    Raises:
        MissingInputError: If the model manifest, the events log or every
            evaluation record is missing
    """
    reuse_path = os.path.join(run_dir, REUSE_FILE)
    if os.path.exists(reuse_path):
        with open(reuse_path, "r") as f:
            trained_in = json.load(f)["trained_in"]
        experiment_dir = os.path.dirname(os.path.dirname(os.path.abspath(run_dir)))
        run_dir = os.path.join(experiment_dir, trained_in)
        logger.info(f"Following reused training to {run_dir}")

    model_path = os.path.join(run_dir, CHECKPOINT_DIR, MODEL_FILE)
    events_path = os.path.join(run_dir, EVENTS_FILE)
    for path in (model_path, events_path):
        if not os.path.exists(path):
            raise MissingInputError(f"Not a training directory, {path} is missing")
    with open(model_path, "r") as f:
        model_cfg = ModelConfig.from_dict(json.load(f)["model"])

    events = read_jsonl(events_path)
    checkpoints = [CheckpointRecord(e["iteration"], e["checkpoint"], e["metrics"], e["score"])
                   for e in events if e["type"] == "eval"]
    if not checkpoints:
        raise MissingInputError(f"{events_path} holds no evaluated checkpoint")
    setup = next((e for e in events if e["type"] == "setup"), {})
    iterations = int(setup.get("iterations", checkpoints[-1].iteration))
    return TrainingResult(run_dir, iterations, checkpoints, select_best(checkpoints), model_cfg)
