"""Mask losses: clamped binary cross-entropy and smoothed dice.

Both reduce over the last axis, so a ``[Q, N]`` batch of probabilities yields
``Q`` loss values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .numcore import Tensor, as_tensor, clip, log, tsum

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    bce: float = 1.0
    dice: float = 1.0
    eps_dice: float = 1.0

    def __post_init__(self):
        if self.bce < 0 or self.dice < 0 or self.eps_dice <= 0:
            raise ContractError(f"loss weights must be non-negative and eps_dice > 0: {self}")


def _check(p, gt):
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ContractError(f"probabilities shape {p.shape} != ground-truth shape {g.shape}")
    return Tensor(g)


def bce_loss(probabilities, gt) -> Tensor:
    p = as_tensor(probabilities)
    g = _check(p, gt)
    pc = clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    per_point = g * log(pc) + (1.0 - g) * log(1.0 - pc)
    return tsum(per_point, axis=-1) * (-1.0 / p.shape[-1])


def dice_loss(probabilities, gt, eps=1.0) -> Tensor:
    p = as_tensor(probabilities)
    g = _check(p, gt)
    inter = tsum(p * g, axis=-1)
    total = tsum(p, axis=-1) + g.data.sum(axis=-1)
    return 1.0 - (2.0 * inter + eps) / (total + eps)


def mask_loss(probabilities, gt, weights: LossWeights = LossWeights()) -> Tensor:
    """``bce * BCE + dice * Dice`` averaged over any leading batch axis."""
    per = weights.bce * bce_loss(probabilities, gt) + weights.dice * dice_loss(probabilities, gt, weights.eps_dice)
    return per.mean() if per.ndim else per
