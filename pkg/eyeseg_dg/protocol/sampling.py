"""
Batch Sampling

Equal per-domain quotas, drawn without replacement inside each domain's epoch.
The batch at any iteration is a pure function of (seed, iteration), so a
resumed run draws exactly the batches an uninterrupted run would.
"""

import logging
import math
from functools import lru_cache
from typing import List, Sequence

import numpy as np

from eyeseg_dg.synth.domains import DomainDataset, EyeSample, derive_seed
from eyeseg_dg.utils.errors import SplitError

logger = logging.getLogger(__name__)


def domain_quota(n_domains: int, multiset_quota: int = 3, single_quota: int = 24) -> int:
    return multiset_quota if n_domains > 1 else single_quota


def iterations_per_epoch(domains: Sequence[DomainDataset], quota: int) -> int:
    """Epochs are measured over the largest domain"""
    return max(1, math.ceil(max(len(d) for d in domains) / quota))


class BatchSampler:
    def __init__(self, domains: Sequence[DomainDataset], quota: int, seed: int):
        if not domains:
            raise SplitError("No training domains to sample from")
        for d in domains:
            if len(d) == 0:
                raise SplitError(f"Training domain {d.name} is empty")
        if quota < 1:
            raise SplitError(f"Per-domain quota must be >= 1, got {quota}")
        self.domains = list(domains)
        self.quota = quota
        self.seed = seed
        self._permutation = lru_cache(maxsize=64)(self._make_permutation)

    def _make_permutation(self, domain_index: int, epoch: int) -> np.ndarray:
        d = self.domains[domain_index]
        rng = np.random.default_rng(derive_seed(self.seed, d.name, "epoch", epoch))
        return rng.permutation(len(d))

    def batch(self, iteration: int) -> List[EyeSample]:
        """
        Samples for one iteration, domain by domain, ``quota`` from each

        A domain that runs out mid-batch continues with its next epoch's
        permutation, so no sample repeats within one of its epochs.
        """
        out = []
        for domain_index, d in enumerate(self.domains):
            n = len(d)
            for k in range(self.quota):
                position = iteration * self.quota + k
                epoch, offset = divmod(position, n)
                out.append(d[int(self._permutation(domain_index, epoch)[offset])])
        return out


def sample_batch(domains: Sequence[DomainDataset], quota: int, iteration: int, seed: int) -> List[EyeSample]:
    return BatchSampler(domains, quota, seed).batch(iteration)
