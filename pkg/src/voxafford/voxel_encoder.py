"""Multi-scale voxel features for the fusion stage.

Each occupied voxel is described by a fixed 5-value geometric descriptor
(occupancy, log-normalized point count, mean in-voxel offset) concatenated with
a sinusoidal encoding of its center, then linearly projected to the model
width.  One projection per resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .geometry import DEFAULT_RESOLUTIONS, VoxelIndexMap, positional_encoding, voxelize
from .numcore import Linear, Module, Tensor

N_DESCRIPTOR = 5


def voxel_descriptor(vmap: VoxelIndexMap, n_points: int, pos_width: int = 24) -> np.ndarray:
    """Raw per-voxel input rows (M x (5 + pos_width))."""
    if vmap.M == 0:
        raise InputError(f"no occupied voxels at resolution {vmap.resolution}")
    occ = np.ones((vmap.M, 1))
    count = np.log1p(vmap.counts)[:, None] / np.log1p(n_points)
    pe = positional_encoding(vmap.centers(), pos_width)
    return np.concatenate([occ, count, vmap.mean_offset, pe], axis=1)


@dataclass(frozen=True)
class VoxelGrid:
    """Non-learnable part of one pyramid level: occupancy plus raw rows."""

    scale: int
    vmap: VoxelIndexMap
    descriptor: np.ndarray

    @property
    def M(self):
        return self.vmap.M

    @property
    def positions(self):
        return self.vmap.centers()


def build_grids(cloud, scales=DEFAULT_RESOLUTIONS, pos_width=24) -> tuple[VoxelGrid, ...]:
    pts = cloud.points if hasattr(cloud, "points") else np.asarray(cloud, dtype=np.float64)
    grids = []
    for r in scales:
        vmap = voxelize(pts, r)
        grids.append(VoxelGrid(r, vmap, voxel_descriptor(vmap, pts.shape[0], pos_width)))
    return tuple(grids)


@dataclass(frozen=True)
class VoxelFeatureSet:
    scale: int
    tokens: Tensor
    positions: np.ndarray

    @property
    def M(self):
        return self.tokens.shape[0]


class VoxelEncoder(Module):
    def __init__(self, d, scales=DEFAULT_RESOLUTIONS, pos_width=24):
        self.scales = tuple(scales)
        self.pos_width = pos_width
        self.proj = [Linear(N_DESCRIPTOR + pos_width, d) for _ in self.scales]

    def encode(self, grids) -> tuple[VoxelFeatureSet, ...]:
        out = []
        for proj, grid in zip(self.proj, grids):
            out.append(VoxelFeatureSet(grid.scale, proj(Tensor(grid.descriptor)), grid.positions))
        return tuple(out)

    def encode_pyramid(self, cloud) -> tuple[VoxelFeatureSet, ...]:
        return self.encode(build_grids(cloud, self.scales, self.pos_width))
