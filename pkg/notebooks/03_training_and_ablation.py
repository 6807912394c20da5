"""
Two-stage training and a small ablation
=======================================

Stage 1 learns part segmentation with fusion frozen.  Stage 2 learns
affordance queries with fusion switched on.  The scale here is tiny so the
script finishes in about a minute on one core; the acceptance suite runs the
full-size protocols.
"""

from voxafford import TrainConfig
from voxafford.datasets import Dataset
from voxafford.synthdata import make_splits
from voxafford.trainer import PreparedCache, evaluate, evaluate_oracle, run_ablation, train_stage1, train_stage2

# 60 objects, with the mug-contain combination kept out of affordance training
ds = Dataset.from_manifest(make_splits(60, 0, ["mug:contain"], n_points=384))
print("split sizes:", ds.split_sizes())

cfg = TrainConfig(d=32, heads=4, k_nn=8, d_pos=12, stage1_epochs=15, stage2_epochs=15, n_points=384)
cache = PreparedCache()
s1 = train_stage1(cfg, ds, cache=cache)
print(f"stage 1: {s1.checkpoint.step} steps, loss {s1.losses[0]:.3f} -> {s1.losses[-1]:.3f}")
s2 = train_stage2(cfg, ds, s1.checkpoint, cache=cache)
print(f"stage 2: {s2.checkpoint.step} steps, loss {s2.losses[0]:.3f} -> {s2.losses[-1]:.3f}")

for split in ("val", "open_set_test"):
    values = evaluate(s2.model, ds, split, cache=cache).values()
    print(f"{split:14s} " + "  ".join(f"{k} {100 * v:5.1f}" for k, v in values.items()))
print("oracle on open_set_test:", evaluate_oracle(ds, "open_set_test").values()["mIoU_i"])

# full model against fusion switched off; stage 1 is trained once and shared
variants = [("full", cfg), ("no_fusion", cfg.replace(fusion_mode="disabled"))]
res = run_ablation(variants, ds, seeds=(0,), cache=cache)
print(res.to_csv())
