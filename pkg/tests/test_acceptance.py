"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines.  Criteria 5,
6 and 8 train models and take most of the suite's wall time.
"""
import math
import time

import numpy as np
import pytest

from voxafford.cli import EXIT_OK, main
from voxafford.config import TrainConfig
from voxafford.datasets import Dataset, overfit_dataset
from voxafford.geometry import normalize, voxelize
from voxafford.losses import bce_loss, dice_loss, mask_loss
from voxafford.metrics import METRIC_NAMES, MetricsReport, average_precision
from voxafford.model import VoxAfford, prepare_cloud
from voxafford.numcore import Tensor, grad_check
from voxafford.synthdata import FAMILIES, FAMILY_AFFORDANCES, LEXICON, generate, make_splits, random_spec
from voxafford.trainer import PreparedCache, evaluate, history_csv, run_ablation, train_stage1, train_stage2

import oracles

# criterion 5: overfit protocol
OVERFIT_SAMPLES = 8
OVERFIT_POINTS = 512
OVERFIT_STAGE1_EPOCHS = 250
OVERFIT_STAGE2_STEPS = 1000

# criterion 6: open-set ablation protocol
ABLATION_SAMPLES = 500
ABLATION_POINTS = 512
ABLATION_HOLDOUT = ["bottle:pour", "mug:contain"]
ABLATION_STAGE1_EPOCHS = 10
ABLATION_STAGE2_EPOCHS = 30
ABLATION_SEEDS = (0, 1, 2)


def report(number, name, ok, detail):
    print(f"\ncriterion {number} [{'PASS' if ok else 'FAIL'}] {name}: {detail}")


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start


def overfit_run():
    ds = overfit_dataset(OVERFIT_SAMPLES, 0, OVERFIT_POINTS)
    cfg = TrainConfig(stage1_epochs=OVERFIT_STAGE1_EPOCHS, stage2_epochs=OVERFIT_STAGE2_STEPS,
                      n_points=OVERFIT_POINTS)
    cache = PreparedCache()
    s1 = train_stage1(cfg, ds, cache=cache)
    s2 = train_stage2(cfg, ds, s1.checkpoint, cache=cache, max_steps=OVERFIT_STAGE2_STEPS)
    rep = evaluate(s2.model, ds, "stage2_train", cache=cache)
    return {"steps": s2.checkpoint.step, "report": rep,
            "csv": history_csv(s1.checkpoint.history) + history_csv(s2.checkpoint.history) + rep.to_csv()}


def ablation_run():
    ds = Dataset.from_manifest(make_splits(ABLATION_SAMPLES, 0, ABLATION_HOLDOUT, n_points=ABLATION_POINTS))
    base = TrainConfig(stage1_epochs=ABLATION_STAGE1_EPOCHS, stage2_epochs=ABLATION_STAGE2_EPOCHS,
                       n_points=ABLATION_POINTS)
    res = run_ablation([("full", base), ("no_fusion", base.replace(fusion_mode="disabled"))], ds,
                       seeds=ABLATION_SEEDS)
    return {"result": res, "csv": res.to_csv() + res.per_seed_csv()}


_runs = {}


def timed_run(key, fn):
    """First run of each training protocol, shared by criteria 5, 6 and 8."""
    if key not in _runs:
        with Timer() as t:
            out = fn()
        _runs[key] = (out, t.seconds)
    return _runs[key]


def test_criterion_1_zero_init_is_a_no_op():
    rng = np.random.default_rng(1)
    model = VoxAfford(TrainConfig()).init(0)
    cfg = model.config
    failures = 0
    with Timer() as t:
        for i in range(100):
            family = FAMILIES[i % len(FAMILIES)]
            sample = generate(random_spec(family, int(rng.integers(1 << 30))), 256)
            cls = FAMILY_AFFORDANCES[family][int(rng.integers(len(FAMILY_AFFORDANCES[family])))]
            query = f"{LEXICON[cls] if rng.random() < 0.5 else cls} the {family}"
            res = model.forward(prepare_cloud(sample.cloud, cfg), model.bow([query]))
            same_tokens = np.array_equal(res.enhanced.data, res.tokens.data)
            same_points = np.array_equal(res.conditioned.data[0], res.features.data)
            failures += not (same_tokens and same_points)
    ok = failures == 0 and t.seconds < 10
    report(1, "zero-init no-op", ok, f"{100 - failures}/100 pairs bitwise equal in {t.seconds:.1f} s")
    assert failures == 0
    assert t.seconds < 10


def test_criterion_2_end_to_end_gradients():
    errors = []
    with Timer() as t:
        for seed in range(5):
            # the enhanced-token injection route carries the fusion gradients
            # well above finite-difference roundoff
            cfg = TrainConfig(d=8, heads=2, k_nn=4, d_pos=6, decoder_layers=1, injection_source="enhanced")
            model = VoxAfford(cfg).init(seed)
            rng = np.random.default_rng(seed)
            # move zero and constant initializations off their special values
            for p in model.parameters():
                if p.init_mode != "xavier":
                    p.data = rng.normal(scale=0.3, size=p.shape)
            prep = prepare_cloud(rng.uniform(-1, 1, (16, 3)), cfg)
            bows = model.bow(["grasp the handle", "pour"])
            gt = (rng.random((2, 16)) < 0.4).astype(float)
            errors.append(grad_check(lambda: mask_loss(model.forward(prep, bows).probabilities, gt),
                                     model.parameters(), h=2e-4))
    worst = max(errors)
    ok = worst < 1e-4 and t.seconds < 120
    report(2, "gradient integrity", ok, f"max relative error {worst:.2e} over 5 seeds in {t.seconds:.1f} s")
    assert worst < 1e-4
    assert t.seconds < 120


def test_criterion_3_metric_oracles():
    rng = np.random.default_rng(3)
    worst = 0.0
    with Timer() as t:
        for _ in range(200):
            samples = oracles.random_instance_set(rng, max_points=64, max_classes=5)
            got = MetricsReport.from_masks([(p, c) for p, _, _, c in samples], [g for _, g, _, _ in samples],
                                           [cls for _, _, cls, _ in samples]).values()
            expect = oracles.all_metrics(samples)
            worst = max(worst, max(abs(got[k] - expect[k]) for k in METRIC_NAMES))
        ap = average_precision([0.9, 0.8, 0.7], [0.6, 0.4, 0.8])
    ap_ok = abs(ap - 5 / 9) < 1e-15
    ok = worst < 1e-9 and ap_ok and t.seconds < 30
    report(3, "metric oracles", ok, f"max deviation {worst:.1e} on 200 sets, worked AP {ap:.6f}, {t.seconds:.1f} s")
    assert worst < 1e-9
    assert ap_ok
    assert t.seconds < 30


def test_criterion_4_loss_sanity():
    with Timer() as t:
        dice_perfect = float(dice_loss(np.array([1.0, 0.0, 1.0, 0.0]), [1, 0, 1, 0]).data)
        bce_half = float(bce_loss(np.full(4, 0.5), [1, 0, 1, 0]).data)
        rng = np.random.default_rng(4)
        gt = (rng.random(12) < 0.5).astype(float)
        grad_err = 0.0
        for fn in (bce_loss, dice_loss):
            p = Tensor(rng.uniform(0.05, 0.95, 12), requires_grad=True)
            grad_err = max(grad_err, grad_check(lambda: fn(p, gt), [p], h=1e-6))
    ok = dice_perfect == 0.0 and abs(bce_half - math.log(2)) < 1e-12 and grad_err < 1e-6 and t.seconds < 5
    report(4, "loss sanity", ok, f"dice(perfect)={dice_perfect}, bce(0.5)-ln2={bce_half - math.log(2):.1e}, "
                                 f"grad error {grad_err:.1e}")
    assert dice_perfect == 0.0
    assert abs(bce_half - math.log(2)) < 1e-12
    assert grad_err < 1e-6
    assert t.seconds < 5


def test_criterion_5_overfit():
    out, seconds = timed_run("overfit", overfit_run)
    miou = out["report"].values()["mIoU_i"]
    ok = miou >= 0.90 and out["steps"] <= OVERFIT_STAGE2_STEPS and seconds < 600
    report(5, "overfit", ok, f"training mIoU_i {miou:.4f} after {out['steps']} stage-2 steps, {seconds:.0f} s")
    assert out["steps"] <= OVERFIT_STAGE2_STEPS
    assert miou >= 0.90
    assert seconds < 600


def test_criterion_6_fusion_ablation_trend():
    out, seconds = timed_run("ablation", ablation_run)
    res = out["result"]
    full = 100 * res.metric("full")
    off = 100 * res.metric("no_fusion")
    per_seed = [(r["seed"], r["variant"], round(100 * r["open_set_test_mIoU_i"], 2)) for r in res.per_seed]
    ok = full - off >= 5.0 and seconds < 45 * 60
    report(6, "fusion ablation trend", ok, f"open_set_test mIoU_i full {full:.2f} vs no_fusion {off:.2f} "
                                           f"(gap {full - off:+.2f}), {seconds:.0f} s, per seed {per_seed}")
    assert full - off >= 5.0
    assert seconds < 45 * 60


def test_criterion_7_token_source_and_scale_harness(tmp_path):
    ds = Dataset.from_manifest(make_splits(12, 0, ["mug:contain"], n_points=256))
    ds.write(tmp_path / "data")
    (tmp_path / "matrix.cfg").write_text("d=8\nheads=2\nk_nn=4\nd_pos=6\ndecoder_layers=1\nstage1_epochs=1\n"
                                         "stage2_epochs=1\nn_points=256\npreset=token_sources,fusion_scales\n")
    code = main(["ablate", "--config", str(tmp_path / "matrix.cfg"), "--data", str(tmp_path / "data"),
                 "--out", str(tmp_path / "out")])
    rows = (tmp_path / "out" / "ablation.csv").read_text().splitlines() if code == EXIT_OK else []
    names = [r.split(",")[0] for r in rows[1:]]
    expected = ["prompt_T__inject_T", "prompt_T__inject_That", "prompt_That__inject_T", "prompt_That__inject_That",
                "scale_16", "scale_32", "scale_64", "same_scale_3x32", "scales_16_32_64"]
    header = rows[0].split(",") if rows else []
    ok = code == EXIT_OK and names == expected and "open_set_test_mIoU_i" in header
    report(7, "token-source and scale ablation harness", ok, f"exit {code}, {len(names)} rows: {', '.join(names)}")
    assert code == EXIT_OK
    assert names == expected
    assert "open_set_test_mIoU_i" in header


def test_criterion_8_reruns_are_bit_identical():
    first_overfit, _ = timed_run("overfit", overfit_run)
    first_ablation, _ = timed_run("ablation", ablation_run)
    same_overfit = overfit_run()["csv"] == first_overfit["csv"]
    same_ablation = ablation_run()["csv"] == first_ablation["csv"]
    ok = same_overfit and same_ablation
    report(8, "determinism", ok, f"criterion 5 CSV identical: {same_overfit}, criterion 6 CSV identical: "
                                 f"{same_ablation}")
    assert same_overfit
    assert same_ablation


def test_criterion_9_geometry_invariants():
    rng = np.random.default_rng(9)
    failures = {"permutation": 0, "clamping": 0, "nesting": 0, "idempotence": 0}
    with Timer() as t:
        for i in range(1000):
            n = int(rng.integers(1, 300))
            raw = rng.normal(size=(n, 3)) * rng.uniform(0.01, 100, 3) + rng.normal(size=3) * 10
            once = normalize(raw).points
            failures["idempotence"] += not np.array_equal(normalize(once).points, once)
            # push some points onto the +-1 faces and the box corners
            pts = once.copy()
            pts[rng.random(pts.shape) < 0.1] = 1.0
            pts[rng.random(pts.shape) < 0.1] = -1.0
            perm = rng.permutation(n)
            grids = {}
            for r in (16, 32, 64):
                a, b = voxelize(pts, r), voxelize(pts[perm], r)
                failures["permutation"] += not (np.array_equal(a.occupied, b.occupied) and
                                                np.array_equal(a.counts, b.counts) and
                                                np.array_equal(a.mean_offset, b.mean_offset))
                failures["clamping"] += not (a.point_to_voxel.min() >= 0 and a.point_to_voxel.max() <= r - 1
                                             and np.abs(a.mean_offset).max() <= 1.0)
                grids[r] = {tuple(v) for v in a.occupied}
            for coarse, fine in ((16, 32), (32, 64)):
                parents = {tuple(np.array(v) // (fine // coarse)) for v in grids[fine]}
                failures["nesting"] += not (parents == grids[coarse] and len(grids[fine]) >= len(grids[coarse]))
    total = sum(failures.values())
    ok = total == 0 and t.seconds < 30
    report(9, "geometry invariants", ok, f"failures {failures} on 1000 clouds in {t.seconds:.1f} s")
    assert total == 0
    assert t.seconds < 30
