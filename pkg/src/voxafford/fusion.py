"""Voxel-token fusion: each token queries its paired voxel scale with
cross-attention, and the retrieved vector is added back through a sigmoid
compatibility gate and a zero-initialized injection matrix.

    g_j     = Attn_j(t_j, phi_j(V_j), phi_j(V_j))
    alpha_j = sigmoid(w_j . [f_s(t_j); f_g(g_j)] + b_j)
    t_hat_j = t_j + alpha_j * (g_j W_j)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .numcore import (
    CrossAttention,
    Linear,
    Module,
    Parameter,
    Tensor,
    broadcast_to,
    concat,
    linear,
    mul,
    reshape,
    sigmoid,
    stack,
)
from .semantic_tokens import AffordanceTokenSet

GATE_BIAS_INIT = -2.0


def parse_mode(mode: str):
    """Return ``(kind, resolution)`` for a fusion mode string."""
    if mode in ("full", "direct_add", "disabled", "same_scale"):
        return mode, None
    if mode.startswith("single:"):
        try:
            return "single", int(mode.split(":", 1)[1])
        except ValueError:
            pass
    raise ConfigError(
        f"unknown fusion mode {mode!r}; expected full, direct_add, disabled, same_scale or single:<R>"
    )


@dataclass(frozen=True)
class EnhancedTokenSet:
    tokens: Tensor  # [Q, K, d]
    gates: np.ndarray  # [Q, K]
    retrieved: Tensor | None  # [Q, K, d]

    @property
    def K(self):
        return self.tokens.shape[-2]


class GateParams(Module):
    def __init__(self, d):
        self.f_s = Linear(d, d)
        self.f_g = Linear(d, d)
        self.w = Parameter((2 * d,), "xavier", fans=(2 * d, 1))
        self.b = Parameter((), "constant", GATE_BIAS_INIT)
        self.W = Parameter((d, d), "zeros")


class ScaleFusion(Module):
    """Parameters and forward pass for one token/scale pair."""

    def __init__(self, d, heads):
        self.phi = Linear(d, d)
        self.attn = CrossAttention(d, heads)
        self.gate = GateParams(d)

    def retrieve(self, t, voxels, return_weights=False):
        """``t`` is ``[Q, d]``; ``voxels`` is ``[M, d]``.  Every query row attends
        the same keys independently."""
        kv = self.phi(voxels)
        q = reshape(t, (1, *t.shape))
        kv = reshape(kv, (1, *kv.shape))
        res = self.attn(q, kv, kv, return_weights=return_weights)
        if return_weights:
            g, w = res
            return reshape(g, t.shape), w[0]
        return reshape(res, t.shape)

    def gate_value(self, t, g):
        p = self.gate
        logit = linear(concat([p.f_s(t), p.f_g(g)], axis=-1), reshape(p.w, (-1, 1)))
        return sigmoid(reshape(logit, logit.shape[:-1]) + p.b)

    def inject(self, t, g, gated=True):
        """Returns ``(t_hat, alpha)``."""
        if t.shape != g.shape:
            raise ContractError(f"token shape {t.shape} != retrieved shape {g.shape}")
        delta = linear(g, self.gate.W)
        alpha = self.gate_value(t, g)
        if not gated:
            return t + delta, alpha
        a = reshape(alpha, (*alpha.shape, 1))
        return t + mul(broadcast_to(a, delta.shape), delta), alpha


class VoxelTokenFusion(Module):
    def __init__(self, d, heads, scales, mode="full"):
        self.scales = tuple(scales)
        self.mode = mode
        kind, res = parse_mode(mode)
        if kind == "single" and self.scales != (res,):
            raise ConfigError(f"fusion mode {mode} requires scales ({res},), got {self.scales}")
        self.blocks = [ScaleFusion(d, heads) for _ in self.scales]

    def _paired_voxels(self, pyramid, kind):
        by_scale = {v.scale: v for v in pyramid}
        if kind == "same_scale":
            mid = self.scales[len(self.scales) // 2]
            return [by_scale[mid]] * len(self.scales)
        try:
            return [by_scale[s] for s in self.scales]
        except KeyError as exc:
            raise ContractError(f"pyramid lacks resolution {exc.args[0]}") from None

    def fuse(self, tokens: AffordanceTokenSet, pyramid, mode=None) -> EnhancedTokenSet:
        mode = self.mode if mode is None else mode
        kind, _ = parse_mode(mode)
        T = tokens.tokens
        if T.ndim == 2:
            T = reshape(T, (1, *T.shape))
        Q, K, d = T.shape
        if K != len(self.scales) or tuple(tokens.scale_tags) != self.scales:
            raise ContractError(f"token scale tags {tokens.scale_tags} do not match fusion scales {self.scales}")
        if kind == "disabled":
            return EnhancedTokenSet(T, np.zeros((Q, K)), None)
        paired = self._paired_voxels(pyramid, kind)
        outs, gates, retrieved = [], [], []
        for j, (block, vox) in enumerate(zip(self.blocks, paired)):
            if kind != "same_scale" and vox.scale != self.scales[j]:
                raise ContractError(f"token {j} is tagged {self.scales[j]} but got voxels at {vox.scale}")
            t = T[:, j, :]
            g = block.retrieve(t, vox.tokens)
            t_hat, alpha = block.inject(t, g, gated=(kind != "direct_add"))
            outs.append(t_hat)
            gates.append(alpha.data)
            retrieved.append(g)
        return EnhancedTokenSet(stack(outs, axis=1), np.stack(gates, axis=1), stack(retrieved, axis=1))
