"""Dense per-point features: two blocks of (per-point linear + GELU, kNN
max-pool concatenated back), then a linear head.

The first block sees each point's coordinates together with their sin/cos
encoding, which lets a shallow network separate surfaces that lie close
together (the inside and outside of a thin wall)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .geometry import knn, positional_encoding
from .numcore import Linear, Module, Tensor, concat, gelu, neighborhood_max


@dataclass(frozen=True)
class PointFeatures:
    features: Tensor  # N x d
    cloud_ref: int = 0

    @property
    def N(self):
        return self.features.shape[0]


class PointBackbone(Module):
    def __init__(self, d, k=16, blocks=2, pos_width=0):
        self.k = k
        self.pos_width = pos_width
        widths = [3 + pos_width] + [2 * d] * (blocks - 1)
        self.blocks = [Linear(w, d) for w in widths]
        self.head = Linear(2 * d, d)

    def block(self, i, x, neighbors):
        h = gelu(self.blocks[i](x))
        return concat([h, neighborhood_max(h, neighbors)], axis=-1)

    def extract(self, points: np.ndarray, neighbors: np.ndarray | None = None) -> PointFeatures:
        points = np.asarray(points, dtype=np.float64)
        if points.shape[0] < self.k:
            raise InputError(f"backbone needs at least k={self.k} points, got {points.shape[0]}")
        if neighbors is None:
            neighbors = knn(points, self.k)
        if self.pos_width:
            x = Tensor(np.concatenate([points, positional_encoding(points, self.pos_width)], axis=1))
        else:
            x = Tensor(points)
        for i in range(len(self.blocks)):
            x = self.block(i, x, neighbors)
        return PointFeatures(self.head(x), id(points))
