"""Dual-pathway propagation of tokens into the decoder inputs.

Prompt path:    q = f_q(mean_j t_j);  p = LN(q + Attn(q, S_p, S_p))
Injection path: F_hat = F + f_zero(Attn(F, S_i, S_i)), f_zero zero-initialized

``S_p`` and ``S_i`` are each either the original tokens or the voxel-enhanced
ones; the default routes enhanced tokens to the prompt and original tokens to
the injection.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError, ContractError
from .numcore import (
    CrossAttention,
    LayerNorm,
    Linear,
    Module,
    Tensor,
    broadcast_to,
    mean,
    reshape,
)

SOURCE_ALIASES = {
    "original": "original",
    "t": "original",
    "enhanced": "enhanced",
    "t_hat": "enhanced",
    "that": "enhanced",
}


def canonical_source(name: str) -> str:
    try:
        return SOURCE_ALIASES[str(name).strip().lower()]
    except KeyError:
        raise ConfigError(f"token source must be one of original/T or enhanced/T_hat, got {name!r}") from None


def assign_pathways(config) -> tuple[str, str]:
    """``(prompt_source, injection_source)`` from a config object or mapping."""
    get = config.get if isinstance(config, dict) else lambda k, default: getattr(config, k, default)
    return (
        canonical_source(get("prompt_source", "enhanced")),
        canonical_source(get("injection_source", "original")),
    )


@dataclass(frozen=True)
class AffordancePrompt:
    vector: Tensor  # [Q, d]


@dataclass(frozen=True)
class ConditionedPointFeatures:
    features: Tensor  # [Q, N, d]


class Propagation(Module):
    def __init__(self, d, heads, K, aggregation="attention"):
        if aggregation not in ("attention", "concat"):
            raise ConfigError(f"aggregation must be attention or concat, got {aggregation!r}")
        self.aggregation = aggregation
        self.f_q = Linear(d, d)
        self.prompt_attn = CrossAttention(d, heads)
        self.prompt_norm = LayerNorm(d)
        self.inject_attn = CrossAttention(d, heads)
        self.f_zero = Linear(d, d, init_mode="zeros")
        self.concat_proj = Linear(K * d, d) if aggregation == "concat" else None

    def make_prompt(self, original: Tensor, source: Tensor) -> AffordancePrompt:
        """``original`` and ``source`` are ``[Q, K, d]``."""
        if original.ndim != 3 or source.shape != original.shape:
            raise ContractError(f"token sets must share shape [Q, K, d]: {original.shape} vs {source.shape}")
        Q, K, d = original.shape
        q = self.f_q(mean(original, axis=1))
        if self.aggregation == "concat":
            agg = self.concat_proj(reshape(source, (Q, K * d)))
        else:
            agg = reshape(self.prompt_attn(reshape(q, (Q, 1, d)), source, source), (Q, d))
        return AffordancePrompt(self.prompt_norm(q + agg))

    def inject_semantics(self, F: Tensor, source: Tensor, enabled=True) -> ConditionedPointFeatures:
        """``F`` is ``[N, d]``; returns ``[Q, N, d]`` features, one copy per query."""
        Q, K, d = source.shape
        if F.ndim != 2 or F.shape[1] != d:
            raise ContractError(f"point features {F.shape} do not match token width {d}")
        Fq = broadcast_to(F, (Q, *F.shape))
        if not enabled:
            return ConditionedPointFeatures(Fq)
        return ConditionedPointFeatures(Fq + self.f_zero(self.inject_attn(Fq, source, source)))
