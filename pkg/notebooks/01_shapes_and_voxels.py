"""
Procedural shapes and the voxel pyramid
=======================================

Generate one object per family, look at its affordance masks, then voxelize
it at the three pyramid resolutions.
"""

import numpy as np

from voxafford.geometry import voxelize
from voxafford.synthdata import FAMILIES, generate, random_spec
from voxafford.voxel_encoder import build_grids

# one object per family; every record is a (query, mask) pair
for family in FAMILIES:
    sample = generate(random_spec(family, 0), 2048)
    parts = ", ".join(sample.part_names)
    print(f"{family:7s} parts: {parts}")
    for r in sample.affordance_records:
        print(f"    {r.query!r:28s} {int(r.mask.sum()):5d} / {len(r.mask)} points")

# occupancy at 16, 32 and 64 cells per axis: finer grids split coarse cells
mug = generate(random_spec("mug", 0), 2048)
for res in (16, 32, 64):
    vmap = voxelize(mug.cloud, res)
    print(f"resolution {res:2d}: {vmap.M:5d} occupied voxels, "
          f"{vmap.counts.max()} points in the fullest one")

# each occupied voxel gets a 5-value descriptor plus a positional encoding of
# its center; the voxel encoder projects this row to width d
grids = build_grids(mug.cloud.points, (16, 32, 64), pos_width=24)
for g in grids:
    print(f"scale {g.scale}: descriptor matrix {g.descriptor.shape}, "
          f"first row {np.round(g.descriptor[0, :5], 3)}")
