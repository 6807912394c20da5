"""Point-cloud container, normalization, brute-force kNN and multi-resolution
voxelization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError

DEFAULT_RESOLUTIONS = (16, 32, 64)


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    source_scale: float = 1.0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InputError(f"points must be N x 3, got shape {pts.shape}")
        if pts.shape[0] < 1:
            raise InputError("point cloud is empty")
        if not np.all(np.isfinite(pts)):
            raise InputError("point cloud contains NaN or Inf")
        object.__setattr__(self, "points", pts)

    @property
    def N(self):
        return self.points.shape[0]

    def permuted(self, perm):
        return PointCloud(self.points[perm], self.source_scale)


def _as_points(cloud):
    if isinstance(cloud, PointCloud):
        return cloud.points, cloud.source_scale
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
        raise InputError(f"expected a non-empty N x 3 array, got shape {pts.shape}")
    return pts, 1.0


def is_normalized(points, tol=1e-12):
    if not np.any(points):
        return points.shape[0] >= 1
    return bool(np.abs(points).max() == 1.0 and np.all(np.abs(points.mean(axis=0)) <= tol))


def normalize(cloud) -> PointCloud:
    """Center on the centroid and scale so that max |coordinate| is exactly 1.

    A cloud that is already normalized is returned unchanged, which makes the
    operation idempotent bit-for-bit.  Degenerate clouds (all points equal)
    collapse to the origin with scale 1.
    """
    pts, prev_scale = _as_points(cloud)
    if not np.all(np.isfinite(pts)):
        raise InputError("point cloud contains NaN or Inf")
    if is_normalized(pts):
        return PointCloud(pts.copy(), prev_scale)
    # test for identical points before centering: the rounded mean can sit an
    # ulp away from them and would then be blown up to +-1
    if not (pts != pts[0]).any():
        return PointCloud(np.zeros_like(pts), 1.0)
    # power-of-two rescaling is exact and keeps subnormal or huge inputs in a
    # range where the mean is representable
    _, exp = np.frexp(np.abs(pts).max())
    out = np.ldexp(pts, -exp)
    scale = 1.0
    # a spread of a few ulps of the offset leaves a rounded mean behind, so
    # repeat until the centroid is really at the origin
    for _ in range(4):
        centered = out - out.mean(axis=0)
        extent = np.abs(centered).max()
        out = centered / extent
        # the arg-max coordinate divides to exactly +-1; pin any 1-ulp stragglers
        np.clip(out, -1.0, 1.0, out=out)
        scale *= extent
        if is_normalized(out):
            break
    return PointCloud(out, float(np.ldexp(scale, exp)))


@dataclass(frozen=True)
class VoxelIndexMap:
    """Occupancy of one resolution.

    ``occupied`` rows are sorted lexicographically; ``inverse[i]`` is the row
    of point ``i``'s voxel.  ``mean_offset`` is the mean of
    (point - voxel center) / half-width per occupied voxel.
    """

    resolution: int
    point_to_voxel: np.ndarray
    occupied: np.ndarray
    counts: np.ndarray
    mean_offset: np.ndarray
    inverse: np.ndarray

    @property
    def M(self):
        return self.occupied.shape[0]

    def centers(self):
        return voxel_centers(self.occupied, self.resolution)


def voxel_centers(indices, resolution):
    return 2.0 * (np.asarray(indices, dtype=np.float64) + 0.5) / resolution - 1.0


def voxel_indices(points, resolution):
    idx = np.floor((points + 1.0) / 2.0 * resolution).astype(np.int64)
    return np.clip(idx, 0, resolution - 1)


def voxelize(cloud, resolution: int) -> VoxelIndexMap:
    pts, _ = _as_points(cloud)
    if resolution < 1:
        raise InputError(f"resolution must be positive, got {resolution}")
    if np.abs(pts).max() > 1.0 + 1e-9:
        raise InputError("voxelize expects a normalized cloud (|x| <= 1)")
    idx = voxel_indices(pts, resolution)
    occupied, inverse, counts = np.unique(idx, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    half = 1.0 / resolution
    offsets = (pts - voxel_centers(idx, resolution)) / half
    # sum in a canonical order (voxel, then coordinates) so the result does
    # not depend on the input point order
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0], inverse))
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    sums = np.add.reduceat(offsets[order], starts, axis=0)
    mean_offset = np.clip(sums / counts[:, None], -1.0, 1.0)
    return VoxelIndexMap(resolution, idx, occupied, counts, mean_offset, inverse)


def knn(cloud, k: int, chunk: int = 512) -> np.ndarray:
    """Exact k nearest neighbors (N x k indices).

    Each point is its own first neighbor; remaining ties break toward the lower
    index.
    """
    pts, _ = _as_points(cloud)
    n = pts.shape[0]
    if k < 1 or k > n:
        raise InputError(f"k={k} must lie in [1, N={n}]")
    out = np.empty((n, k), dtype=np.int64)
    for start in range(0, n, chunk):
        block = pts[start : start + chunk]
        diff = block[:, None, :] - pts[None, :, :]
        dist = np.einsum("ijk,ijk->ij", diff, diff)
        rows = np.arange(block.shape[0])
        dist[rows, start + rows] = -1.0
        out[start : start + chunk] = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return out


def positional_encoding(centers: np.ndarray, width: int = 24) -> np.ndarray:
    """Sin/cos features of each coordinate at octave frequencies pi * 2^f."""
    if width % 6:
        raise InputError(f"positional width must be a multiple of 6, got {width}")
    n_freq = width // 6
    freqs = np.pi * 2.0 ** np.arange(n_freq)
    ang = centers[:, :, None] * freqs  # M x 3 x F
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=2).reshape(centers.shape[0], width)
