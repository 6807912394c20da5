"""The assembled network: voxel encoder, token heads, fusion, point backbone,
propagation and decoder, plus the per-cloud preprocessing they share."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import TrainConfig
from .decoder import AffordanceDecoder, AffordanceMask
from .geometry import knn, normalize
from .numcore import Module, Tensor, no_grad
from .fusion import VoxelTokenFusion
from .point_backbone import PointBackbone
from .propagation import Propagation
from .semantic_tokens import TokenHeads, bag_of_words
from .voxel_encoder import VoxelEncoder, build_grids


@dataclass(frozen=True)
class PreparedCloud:
    """Everything about a cloud that does not depend on learned weights."""

    points: np.ndarray
    neighbors: np.ndarray
    grids: tuple

    @property
    def N(self):
        return self.points.shape[0]


def prepare_cloud(cloud, config: TrainConfig) -> PreparedCloud:
    pts = normalize(cloud).points
    return PreparedCloud(pts, knn(pts, config.k_nn), build_grids(pts, config.scales, config.d_pos))


@dataclass
class ForwardResult:
    tokens: Tensor  # T, [Q, K, d]
    enhanced: Tensor  # T_hat, [Q, K, d]
    gates: np.ndarray
    features: Tensor  # F, [N, d]
    conditioned: Tensor  # F_hat, [Q, N, d]
    prompt: Tensor  # [Q, d]
    probabilities: Tensor  # [Q, N]


class VoxAfford(Module):
    def __init__(self, config: TrainConfig):
        c = config
        self.config = c
        self.voxel_encoder = VoxelEncoder(c.d, c.scales, c.d_pos)
        self.token_heads = TokenHeads(c.d, c.token_scales, c.word_seed)
        self.fusion = VoxelTokenFusion(c.d, c.heads, c.token_scales, c.fusion_mode)
        self.backbone = PointBackbone(c.d, c.k_nn, pos_width=c.d_pos)
        self.propagation = Propagation(c.d, c.heads, c.K, c.aggregation)
        self.decoder = AffordanceDecoder(c.d, c.heads, c.decoder_layers)

    def bow(self, queries) -> np.ndarray:
        return np.stack([bag_of_words(q, self.config.d, self.config.word_seed) for q in queries])

    def forward(self, prepared: PreparedCloud, bows: np.ndarray, *, fusion_mode=None, injection=None,
                prompt_source=None, injection_source=None) -> ForwardResult:
        c = self.config
        fusion_mode = c.fusion_mode if fusion_mode is None else fusion_mode
        injection = c.injection if injection is None else injection
        prompt_source = c.prompt_source if prompt_source is None else prompt_source
        injection_source = c.injection_source if injection_source is None else injection_source

        token_set = self.token_heads.embed_vectors(np.atleast_2d(bows))
        T = token_set.tokens
        if fusion_mode == "disabled":
            enhanced = self.fusion.fuse(token_set, (), mode="disabled")
        else:
            pyramid = self.voxel_encoder.encode(prepared.grids)
            enhanced = self.fusion.fuse(token_set, pyramid, mode=fusion_mode)
        T_hat = enhanced.tokens

        F = self.backbone.extract(prepared.points, prepared.neighbors).features
        pick = {"original": T, "enhanced": T_hat}
        prompt = self.propagation.make_prompt(T, pick[prompt_source]).vector
        F_hat = self.propagation.inject_semantics(F, pick[injection_source], enabled=(injection == "on")).features
        probs = self.decoder.probabilities(prompt, F_hat)
        return ForwardResult(T, T_hat, enhanced.gates, F, F_hat, prompt, probs)

    def predict(self, prepared: PreparedCloud, queries, **overrides) -> list[AffordanceMask]:
        with no_grad():
            res = self.forward(prepared, self.bow(queries), **overrides)
        return [AffordanceMask(p, q) for p, q in zip(res.probabilities.data, queries)]
