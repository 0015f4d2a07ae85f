"""
Dataset Registry

Named domains with subject-disjoint train/test splits at one common
resolution, plus the per-domain validation holdout.
"""

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Any, Dict, Iterator, List, Sequence, Tuple

import numpy as np

from eyeseg_dg.synth.domains import DomainDataset, derive_seed, load_domain_specs, make_domain
from eyeseg_dg.synth.manifest import read_domain
from eyeseg_dg.utils.errors import ConfigError, IntegrityError, SplitError

logger = logging.getLogger(__name__)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_dataset(dataset: DomainDataset, test_fraction: float = 0.25, seed: int = 7,
                  policy: str = "subject") -> Tuple[DomainDataset, DomainDataset]:
    """
    Partition a domain into train and test splits

    Args:
        dataset: Domain to split
        test_fraction: Share of subjects (or images) assigned to test
        seed: Master seed; the partition is a pure function of (seed, domain)
        policy: "subject" keeps every subject on one side; "image" splits images

    Returns:
        Tuple of (train, test)

    Raises:
        SplitError: Fewer than two subjects under the subject policy
    """
    rng = np.random.default_rng(derive_seed(seed, dataset.name, "split"))
    if policy == "image":
        order = rng.permutation(len(dataset))
        n_test = max(1, min(len(dataset) - 1, _round_half_up(len(dataset) * test_fraction)))
        test_idx = set(order[:n_test].tolist())
        train = [s for i, s in enumerate(dataset) if i not in test_idx]
        test = [s for i, s in enumerate(dataset) if i in test_idx]
        return dataset.subset(train), dataset.subset(test)
    if policy != "subject":
        raise ConfigError(f"Unknown split policy '{policy}'")

    subjects = dataset.subjects()
    if len(subjects) < 2:
        raise SplitError(f"Domain {dataset.name} has {len(subjects)} subject(s); "
                         f"a subject-disjoint split needs at least 2")
    n_test = max(1, min(len(subjects) - 1, _round_half_up(len(subjects) * test_fraction)))
    shuffled = [subjects[i] for i in rng.permutation(len(subjects))]
    test_subjects = set(shuffled[:n_test])
    train = [s for s in dataset if s.subject not in test_subjects]
    test = [s for s in dataset if s.subject in test_subjects]
    logger.debug(f"Split {dataset.name}: {len(subjects) - n_test} train subjects ({len(train)} images), "
                 f"{n_test} test subjects ({len(test)} images)")
    return dataset.subset(train), dataset.subset(test)


def holdout_validation(train_sets: Sequence[DomainDataset], fraction: float = 0.2,
                       seed: int = 7) -> Tuple[List[DomainDataset], List[DomainDataset]]:
    """
    Withhold a share of every training domain for validation

    Stratified per domain; each domain's holdout is a pure function of
    (seed, domain name).
    """
    kept, held = [], []
    for dataset in train_sets:
        n = len(dataset)
        if n == 0:
            raise SplitError(f"Training split of {dataset.name} is empty")
        # at least one validation image whenever the split can spare it
        n_val = min(n - 1, max(1, _round_half_up(n * fraction)))
        order = np.random.default_rng(derive_seed(seed, dataset.name, "holdout")).permutation(n)
        val_idx = set(order[:n_val].tolist())
        kept.append(dataset.subset([s for i, s in enumerate(dataset) if i not in val_idx]))
        held.append(dataset.subset([s for i, s in enumerate(dataset) if i in val_idx]))
    return kept, held


@dataclass
class DomainEntry:
    name: str
    condition: str
    annotation_profile: str
    train: DomainDataset
    test: DomainDataset


class DatasetRegistry:
    """Ordered mapping of domain name to its splits"""

    def __init__(self, height: int = 72, width: int = 96):
        self.height = height
        self.width = width
        self._entries: "OrderedDict[str, DomainEntry]" = OrderedDict()

    def add(self, dataset: DomainDataset, test_fraction: float = 0.25, seed: int = 7) -> DomainEntry:
        """
        Register a domain, splitting it by subject

        Raises:
            IntegrityError: On a resolution mismatch or a duplicate name
        """
        if (dataset.height, dataset.width) != (self.height, self.width):
            raise IntegrityError(f"Domain {dataset.name} is {dataset.width}x{dataset.height}, "
                                 f"registry resolution is {self.width}x{self.height}")
        if dataset.name in self._entries:
            raise IntegrityError(f"Domain {dataset.name} registered twice")
        train, test = split_dataset(dataset, test_fraction, seed)
        entry = DomainEntry(dataset.name, dataset.condition, dataset.annotation_profile, train, test)
        self._entries[dataset.name] = entry
        logger.info(f"Registered {dataset.name} ({dataset.condition}, {dataset.annotation_profile}): "
                    f"{len(train)} train / {len(test)} test images")
        return entry

    def names(self) -> List[str]:
        return list(self._entries)

    def __getitem__(self, name: str) -> DomainEntry:
        if name not in self._entries:
            raise ConfigError(f"Domain '{name}' is not registered (known: {', '.join(self._entries)})")
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[DomainEntry]:
        return iter(self._entries.values())

    def __len__(self) -> int:
        return len(self._entries)


def build_registry(config: Dict[str, Any]) -> DatasetRegistry:
    """
    Render (or ingest) every configured domain and split it

    Args:
        config: Merged experiment configuration

    Returns:
        DatasetRegistry: One entry per stock/spec-file domain and per manifest
    """
    section = config["registry"]
    seed = int(config["seed"])
    height, width = int(section["height"]), int(section["width"])
    registry = DatasetRegistry(height, width)

    specs = load_domain_specs(section["domains"]) if section["domains"] else []
    include = list(section.get("include") or [])
    unknown = set(include) - {s.name for s in specs} - set(section.get("manifests") or {})
    if unknown:
        raise ConfigError(f"registry.include names unknown domains: {', '.join(sorted(unknown))}")
    for spec in specs:
        if include and spec.name not in include:
            continue
        dataset = make_domain(spec, int(section["images_per_subject"]), seed, height, width)
        registry.add(dataset, float(section["test_fraction"]), seed)

    for name, directory in sorted((section.get("manifests") or {}).items()):
        dataset = read_domain(directory, height, width)
        if dataset.name != name:
            raise ConfigError(f"registry.manifests.{name} points at domain '{dataset.name}'")
        registry.add(dataset, float(section["test_fraction"]), seed)

    if len(registry) == 0:
        raise ConfigError("The registry is empty; check registry.domains and registry.include")
    return registry
