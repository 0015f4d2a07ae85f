"""
Synthetic Domains Module

Renders heterogeneous eye-image domains and reads/writes domain directories.
"""

from eyeseg_dg.synth.domains import (
    DomainDataset,
    DomainSpec,
    EyeSample,
    load_domain_specs,
    make_domain,
    render_sample,
)
from eyeseg_dg.synth.manifest import read_domain, write_domain
from eyeseg_dg.synth.stats import DomainStats, domain_stats

__all__ = [
    "DomainDataset", "DomainSpec", "EyeSample", "load_domain_specs", "make_domain",
    "render_sample", "read_domain", "write_domain", "DomainStats", "domain_stats",
]
