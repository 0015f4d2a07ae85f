"""
Augmentation Module

Photometric and geometric augmentations with annotation co-transformation.
"""

from eyeseg_dg.augment.pipeline import (
    AugmentationEvent,
    AugmentationKind,
    AugmentSettings,
    apply_random,
    augment_sample,
    geometric,
    photometric,
    random_hflip,
    replay_event,
)

__all__ = [
    "AugmentationEvent", "AugmentationKind", "AugmentSettings", "apply_random", "augment_sample",
    "geometric", "photometric", "random_hflip", "replay_event",
]
