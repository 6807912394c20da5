"""Two-way transformer mask decoder with a single prompt token.

Per layer: the prompt attends the points (residual + LN, then a small MLP with
residual + LN), then the points attend the prompt (residual + LN).  Logits are
the scaled dot product between a linear head of the final prompt and each
point's final feature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .numcore import (
    CrossAttention,
    LayerNorm,
    Linear,
    Module,
    Tensor,
    gelu,
    matmul,
    reshape,
    sigmoid,
    swapaxes,
)

THRESHOLD = 0.5


@dataclass
class AffordanceMask:
    probabilities: np.ndarray
    query: str = ""
    threshold: float = THRESHOLD
    binary: np.ndarray = field(init=False)
    confidence: float = field(init=False)

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        if not np.all(np.isfinite(p)) or p.min(initial=0.0) < 0 or p.max(initial=0.0) > 1:
            raise ContractError("mask probabilities must be finite and within [0, 1]")
        self.probabilities = p
        self.binary = p >= self.threshold
        self.confidence = float(p[self.binary].mean()) if self.binary.any() else 0.0


class TwoWayLayer(Module):
    def __init__(self, d, heads, mlp_ratio=2):
        self.prompt_to_points = CrossAttention(d, heads)
        self.norm1 = LayerNorm(d)
        self.mlp_in = Linear(d, mlp_ratio * d)
        self.mlp_out = Linear(mlp_ratio * d, d)
        self.norm2 = LayerNorm(d)
        self.points_to_prompt = CrossAttention(d, heads)
        self.norm3 = LayerNorm(d)

    def __call__(self, prompt, points):
        """``prompt`` [Q, 1, d], ``points`` [Q, N, d]."""
        prompt = self.norm1(prompt + self.prompt_to_points(prompt, points, points))
        prompt = self.norm2(prompt + self.mlp_out(gelu(self.mlp_in(prompt))))
        points = self.norm3(points + self.points_to_prompt(points, prompt, prompt))
        return prompt, points


class AffordanceDecoder(Module):
    def __init__(self, d, heads, layers=2):
        self.d = d
        self.layers = [TwoWayLayer(d, heads) for _ in range(layers)]
        self.mask_head = Linear(d, d)

    def logits(self, prompt: Tensor, points: Tensor) -> Tensor:
        """``prompt`` [Q, d], ``points`` [Q, N, d] -> logits [Q, N]."""
        if prompt.ndim != 2 or points.ndim != 3 or prompt.shape[-1] != self.d or points.shape[-1] != self.d:
            raise ContractError(f"decoder width mismatch: prompt {prompt.shape}, points {points.shape}, d={self.d}")
        if prompt.shape[0] != points.shape[0]:
            raise ContractError(f"prompt batch {prompt.shape[0]} != point batch {points.shape[0]}")
        Q = prompt.shape[0]
        p = reshape(prompt, (Q, 1, self.d))
        x = points
        for layer in self.layers:
            p, x = layer(p, x)
        head = self.mask_head(p)  # Q x 1 x d
        scores = matmul(x, swapaxes(head, -1, -2)) * (1.0 / math.sqrt(self.d))  # Q x N x 1
        return reshape(scores, scores.shape[:2])

    def probabilities(self, prompt, points) -> Tensor:
        return sigmoid(self.logits(prompt, points))

    def decode(self, prompt, points, query="") -> AffordanceMask:
        """Single-query convenience wrapper returning an :class:`AffordanceMask`."""
        pv = prompt.vector if hasattr(prompt, "vector") else prompt
        xf = points.features if hasattr(points, "features") else points
        if pv.ndim == 1:
            pv = reshape(pv, (1, -1))
        if xf.ndim == 2:
            xf = reshape(xf, (1, *xf.shape))
        probs = self.probabilities(pv, xf)
        return AffordanceMask(probs.data[0], query)
