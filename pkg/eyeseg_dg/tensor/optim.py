"""
ADAM Optimizer

Bias-corrected ADAM over a fixed, ordered list of parameter tensors.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from eyeseg_dg.tensor.autodiff import Tensor
from eyeseg_dg.utils.errors import ShapeError

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """Per-parameter moment accumulators plus the update counter"""
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: List[np.ndarray] = field(default_factory=list)
    second_moment: List[np.ndarray] = field(default_factory=list)
    rejected_steps: int = 0


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: AdamState) -> bool:
    """
    Apply one ADAM update in place

    Args:
        params: Parameter tensors, updated in place
        grads: One gradient per parameter; None is treated as zero
        state: Optimizer state, updated in place

    Returns:
        bool: False when the step was rejected because a gradient was not finite

    Raises:
        ShapeError: If a gradient or accumulator shape disagrees with its parameter
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]

    dense = []
    for p, g, m in zip(params, grads, state.first_moment):
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.dtype)
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
        dense.append(g)

    if not all(np.all(np.isfinite(g)) for g in dense):
        state.rejected_steps += 1
        logger.warning(f"Rejected optimizer step {state.step_count + 1}: non-finite gradient")
        return False

    state.step_count += 1
    t = state.step_count
    corr1 = 1.0 - state.beta1 ** t
    corr2 = 1.0 - state.beta2 ** t
    for i, (p, g) in enumerate(zip(params, dense)):
        m = state.first_moment[i]
        v = state.second_moment[i]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / corr1
        v_hat = v / corr2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
    return True

