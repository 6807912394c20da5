"""Two-stage training, evaluation, checkpoints and ablation matrices.

Stage 1 learns part segmentation from part-name queries with the voxel route
switched off.  Stage 2 starts from the stage-1 weights and learns affordance
masks with fusion and propagation trainable.  All randomness comes from the
config seed, so a (config, dataset) pair fixes every parameter and metric.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .datasets import CloudItem, Dataset
from .errors import ConfigError, DimensionError, EvaluationError, TrainingError
from .fusion import parse_mode
from .losses import LossWeights, bce_loss, dice_loss
from .metrics import METRIC_NAMES, MetricsReport
from .model import PreparedCloud, VoxAfford, prepare_cloud
from .numcore import load_parameters, no_grad, save_parameters, tsum

log = logging.getLogger(__name__)

STAGE_SPLITS = {1: "stage1_train", 2: "stage2_train"}
CHECKPOINT_META = "meta.json"
ADAM_EPS = 1e-8


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    config: TrainConfig
    stage: int
    epoch: int
    step: int
    params: dict[str, np.ndarray]
    init_modes: dict[str, str]
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict | None = None
    history: list[dict] = field(default_factory=list)

    def save(self, root) -> Path:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        save_parameters(root / "params", [(k, v, self.init_modes.get(k, "xavier")) for k, v in self.params.items()])
        save_parameters(root / "optimizer", [(k, v, "zeros") for k, v in self.optimizer_state.items()])
        meta = {
            "stage": self.stage,
            "epoch": self.epoch,
            "step": self.step,
            "config": self.config.to_text(),
            "rng_state": self.rng_state,
            "history": self.history,
        }
        (root / CHECKPOINT_META).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return root

    @classmethod
    def load(cls, root) -> "Checkpoint":
        root = Path(root)
        meta_path = root / CHECKPOINT_META
        if not meta_path.is_file():
            raise FileNotFoundError(f"checkpoint metadata not found: {meta_path}")
        meta = json.loads(meta_path.read_text())
        loaded = load_parameters(root / "params")
        opt_state = {k: v for k, (v, _) in load_parameters(root / "optimizer").items()}
        return cls(
            config=TrainConfig.from_text(meta["config"], meta_path),
            stage=int(meta["stage"]),
            epoch=int(meta["epoch"]),
            step=int(meta["step"]),
            params={k: v for k, (v, _) in loaded.items()},
            init_modes={k: m for k, (_, m) in loaded.items()},
            optimizer_state=opt_state,
            rng_state=meta.get("rng_state"),
            history=list(meta.get("history", [])),
        )


def snapshot(model: VoxAfford, config, stage, epoch=0, step=0, optimizer=None, rng=None, history=()) -> Checkpoint:
    named = list(model.named_parameters())
    return Checkpoint(
        config=config,
        stage=stage,
        epoch=epoch,
        step=step,
        params={k: p.data.copy() for k, p in named},
        init_modes={k: p.init_mode for k, p in named},
        optimizer_state={} if optimizer is None else optimizer.state_dict(),
        rng_state=None if rng is None else rng.bit_generator.state,
        history=list(history),
    )


_ARCH_FIELDS = ("d", "heads", "decoder_layers", "scales", "k_nn", "d_pos", "word_seed")


def build_model(config: TrainConfig, init: Checkpoint | None = None) -> VoxAfford:
    """Fresh model seeded from ``config.seed``; weights present in ``init``
    overwrite the fresh ones, anything new (e.g. a concat projection) keeps
    its fresh initialization."""
    model = VoxAfford(config).init(config.seed)
    if init is not None:
        for f in _ARCH_FIELDS:
            a, b = getattr(init.config, f), getattr(config, f)
            if a != b:
                raise ConfigError(f"checkpoint {f}={a} is incompatible with config {f}={b}")
        try:
            model.load_state_dict(init.params, strict=False)
        except DimensionError as exc:
            raise ConfigError(f"checkpoint does not fit this config: {exc}") from None
    return model


# ---------------------------------------------------------------- data prep

@dataclass
class PreparedItem:
    item: CloudItem
    cloud: PreparedCloud
    bows: np.ndarray
    gts: np.ndarray
    queries: tuple[str, ...]


class PreparedCache:
    """Per-cloud neighbourhoods and voxel grids, reused across runs whose
    preprocessing settings agree."""

    def __init__(self):
        self._store: dict = {}

    def get(self, item: CloudItem, model: VoxAfford) -> PreparedItem:
        c = model.config
        key = (id(item), item.sample_id, c.k_nn, c.scales, c.d_pos, c.d, c.word_seed)
        hit = self._store.get(key)
        if hit is None or hit.item is not item:
            queries = tuple(r.query for r in item.records)
            hit = PreparedItem(
                item,
                prepare_cloud(item.points, c),
                model.bow(queries),
                np.stack([np.asarray(r.mask, dtype=np.float64) for r in item.records]),
                queries,
            )
            self._store[key] = hit
        return hit


# ---------------------------------------------------------------- training

def stage_overrides(config: TrainConfig, stage: int) -> dict:
    if stage == 1:
        return {"fusion_mode": "disabled", "injection": "off"}
    return {}


def trainable_modules(model: VoxAfford, config: TrainConfig, stage: int):
    if stage == 1:
        return [model.backbone, model.decoder, model.voxel_encoder, model.token_heads]
    mods = [model.fusion, model.propagation, model.backbone, model.decoder]
    if config.train_token_heads_stage2:
        mods.append(model.token_heads)
    if not config.freeze_voxel_encoder:
        mods.append(model.voxel_encoder)
    return mods


def _set_trainable(model, config, stage):
    model.set_trainable(False)
    for m in trainable_modules(model, config, stage):
        m.set_trainable(True)
    return [(n, p) for n, p in model.named_parameters() if p.requires_grad]


def sample_loss(model: VoxAfford, prep: PreparedItem, weights: LossWeights, **overrides):
    """Summed per-record loss for one cloud (all its queries at once)."""
    probs = model.forward(prep.cloud, prep.bows, **overrides).probabilities
    per = weights.bce * bce_loss(probs, prep.gts) + weights.dice * dice_loss(probs, prep.gts, weights.eps_dice)
    return tsum(per)


def loss_weights(config: TrainConfig) -> LossWeights:
    return LossWeights(config.lambda_bce, config.lambda_dice, config.eps_dice)


@dataclass
class StageResult:
    checkpoint: Checkpoint
    model: VoxAfford
    losses: list[float]  # one per optimizer step


def train_stage(config: TrainConfig, dataset: Dataset, stage: int, init: Checkpoint | None = None, *,
                epochs=None, max_steps=None, cache: PreparedCache | None = None, eval_split=None,
                step_callback=None) -> StageResult:
    """Run one training stage with the configured optimizer.

    A batch holds ``batch_size`` clouds; the loss is the mean over every
    record in the batch.  If ``init`` is a checkpoint of the same stage,
    training resumes from its epoch, optimizer and shuffle state.
    """
    if stage not in STAGE_SPLITS:
        raise ConfigError(f"stage must be 1 or 2, got {stage}")
    items = dataset.split(STAGE_SPLITS[stage])
    if not items:
        raise TrainingError(f"split {STAGE_SPLITS[stage]} is empty")
    if stage == 2 and init is None:
        raise ConfigError("stage 2 needs a stage-1 checkpoint to start from")
    epochs = (config.stage1_epochs if stage == 1 else config.stage2_epochs) if epochs is None else epochs
    cache = cache or PreparedCache()
    model = build_model(config, init)
    trainable = _set_trainable(model, config, stage)
    weights = loss_weights(config)
    overrides = stage_overrides(config, stage)

    resume = init is not None and init.stage == stage
    rng = np.random.default_rng([config.seed, stage, 104729])
    optimizer = Optimizer(trainable, config)
    start_epoch, step, history = 0, 0, []
    if resume:
        if init.rng_state is not None:
            rng.bit_generator.state = init.rng_state
        optimizer.load_state_dict(init.optimizer_state)
        start_epoch, step, history = init.epoch, init.step, list(init.history)

    prepared = [cache.get(it, model) for it in items]
    losses = []
    epoch = start_epoch
    for epoch in range(start_epoch + 1, epochs + 1):
        order = rng.permutation(len(prepared))
        epoch_losses = []
        for b0 in range(0, len(order), config.batch_size):
            if max_steps is not None and step >= max_steps:
                break
            batch = [prepared[i] for i in order[b0:b0 + config.batch_size]]
            n_records = sum(len(p.queries) for p in batch)
            total = 0.0
            model.zero_grad()
            for prep in batch:
                loss = sample_loss(model, prep, weights, **overrides) * (1.0 / n_records)
                val = float(loss.data)
                if not math.isfinite(val):
                    raise TrainingError(f"non-finite loss in stage {stage}, epoch {epoch}, batch {b0 // config.batch_size}")
                loss.backward()
                total += val
            optimizer.step()
            step += 1
            losses.append(total)
            epoch_losses.append(total)
            if step_callback is not None:
                step_callback(step, total, model)
        row = {"stage": stage, "epoch": epoch, "step": step,
               "train_loss": float(np.mean(epoch_losses)) if epoch_losses else float("nan")}
        if eval_split and stage == 2 and _should_eval(config, epoch, epochs):
            report = evaluate(model, dataset, eval_split, cache=cache)
            row.update({f"{eval_split}_{k}": v for k, v in report.values().items()})
        history.append(row)
        log.info("stage %d epoch %d step %d loss %.5f", stage, epoch, step, row["train_loss"])
        if max_steps is not None and step >= max_steps:
            break
    model.set_trainable(True)
    ckpt = snapshot(model, config, stage, epoch if epochs > start_epoch else start_epoch, step,
                    optimizer, rng, history)
    return StageResult(ckpt, model, losses)


def _should_eval(config, epoch, epochs):
    if config.eval_every > 0 and epoch % config.eval_every == 0:
        return True
    return epoch == epochs


class Optimizer:
    """Adam or SGD with momentum over the trainable parameters, with optional
    global-norm gradient clipping.  State is keyed by parameter name."""

    def __init__(self, trainable, config: TrainConfig):
        self.params = list(trainable)
        self.config = config
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params} if config.optimizer == "adam" else {}

    def step(self):
        c = self.config
        grads = [(n, p, p.grad) for n, p in self.params if p.grad is not None]
        if c.grad_clip > 0:
            norm = math.sqrt(sum(float(np.sum(g * g)) for _, _, g in grads))
            if norm > c.grad_clip:
                grads = [(n, p, g * (c.grad_clip / norm)) for n, p, g in grads]
        self.t += 1
        for n, p, g in grads:
            m = self.m[n]
            if c.optimizer == "sgd":
                m *= c.momentum
                m += g
                p.data = p.data - c.lr * m
                continue
            v = self.v[n]
            m *= c.momentum
            m += (1.0 - c.momentum) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * (g * g)
            m_hat = m / (1.0 - c.momentum ** self.t)
            v_hat = v / (1.0 - c.beta2 ** self.t)
            p.data = p.data - c.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"t": np.array(float(self.t))}
        out.update({f"m/{n}": a.copy() for n, a in self.m.items()})
        out.update({f"v/{n}": a.copy() for n, a in self.v.items()})
        return out

    def load_state_dict(self, state):
        self.t = int(state.get("t", 0))
        for key, arr in state.items():
            kind, _, name = key.partition("/")
            table = {"m": self.m, "v": self.v}.get(kind)
            if table is not None and name in table and table[name].shape == arr.shape:
                table[name] = arr.copy()


def train_stage1(config: TrainConfig, dataset: Dataset, **kw) -> StageResult:
    return train_stage(config, dataset, 1, **kw)


def train_stage2(config: TrainConfig, dataset: Dataset, init: Checkpoint, **kw) -> StageResult:
    if init is None:
        raise ConfigError("stage 2 needs a stage-1 checkpoint to start from")
    return train_stage(config, dataset, 2, init, **kw)


# ---------------------------------------------------------------- evaluation

def predict_split(model: VoxAfford, dataset: Dataset, split: str, cache: PreparedCache | None = None):
    """Masks, ground truths and classes for every record in ``split``."""
    cache = cache or PreparedCache()
    masks, gts, classes = [], [], []
    for it in dataset.split(split):
        prep = cache.get(it, model)
        masks.extend(model.predict(prep.cloud, prep.queries))
        gts.extend(r.mask for r in it.records)
        classes.extend(r.cls for r in it.records)
    return masks, gts, classes


def evaluate(model: VoxAfford | Checkpoint, dataset: Dataset, split: str, cache=None) -> MetricsReport:
    if isinstance(model, Checkpoint):
        model = build_model(model.config, model)
    masks, gts, classes = predict_split(model, dataset, split, cache)
    if not masks:
        raise EvaluationError(f"split {split} has no records")
    return MetricsReport.from_masks(masks, gts, classes, split=split, n_records=len(masks))


def evaluate_oracle(dataset: Dataset, split: str) -> MetricsReport:
    """Feed ground truth back as predictions (confidence 1): the upper bound."""
    masks, gts, classes = [], [], []
    for it in dataset.split(split):
        for r in it.records:
            masks.append((r.mask, 1.0))
            gts.append(r.mask)
            classes.append(r.cls)
    if not masks:
        raise EvaluationError(f"split {split} has no records")
    return MetricsReport.from_masks(masks, gts, classes, split=split, n_records=len(masks), oracle=True)


def history_csv(history: list[dict]) -> str:
    cols = ["stage", "epoch", "step", "train_loss"]
    for row in history:
        cols.extend(k for k in row if k not in cols)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in history:
        out = []
        for c in cols:
            v = row.get(c, "")
            if c.split("_", 1)[-1] in METRIC_NAMES and v != "":
                v = f"{100.0 * v:.4f}"
            elif isinstance(v, float):
                v = f"{v:.10g}"
            out.append(v)
        w.writerow(out)
    return buf.getvalue()


# ---------------------------------------------------------------- ablations

PRESETS = {
    "components": [
        ("full", {}),
        ("no_fusion", {"fusion_mode": "disabled"}),
        ("no_injection", {"injection": "off"}),
        ("concat_aggregation", {"aggregation": "concat"}),
        ("direct_add", {"fusion_mode": "direct_add"}),
    ],
    "token_sources": [
        ("prompt_T__inject_T", {"prompt_source": "original", "injection_source": "original"}),
        ("prompt_T__inject_That", {"prompt_source": "original", "injection_source": "enhanced"}),
        ("prompt_That__inject_T", {"prompt_source": "enhanced", "injection_source": "original"}),
        ("prompt_That__inject_That", {"prompt_source": "enhanced", "injection_source": "enhanced"}),
    ],
    "fusion_scales": [
        ("scale_16", {"fusion_mode": "single:16"}),
        ("scale_32", {"fusion_mode": "single:32"}),
        ("scale_64", {"fusion_mode": "single:64"}),
        ("same_scale_3x32", {"fusion_mode": "same_scale"}),
        ("scales_16_32_64", {"fusion_mode": "full"}),
    ],
}


@dataclass
class AblationMatrix:
    base: TrainConfig
    variants: list[tuple[str, TrainConfig]]
    seeds: tuple[int, ...] = (0,)

    @classmethod
    def from_dict(cls, values: dict) -> "AblationMatrix":
        base_vals, per_variant, presets, seeds = {}, {}, [], None
        order: list[str] = []
        for key, raw in values.items():
            if key.startswith("variant."):
                rest = key[len("variant."):]
                if "." not in rest:
                    raise ConfigError(f"variant keys look like variant.<name>.<key>, got {key!r}")
                name, sub = rest.split(".", 1)
                if name not in per_variant:
                    per_variant[name] = {}
                    order.append(name)
                per_variant[name][sub] = raw
            elif key in ("preset", "presets"):
                presets.extend(p.strip() for p in str(raw).split(",") if p.strip())
            elif key == "seeds":
                seeds = tuple(int(s) for s in str(raw).split(",") if s.strip())
            else:
                base_vals[key] = raw
        base = TrainConfig.from_dict(base_vals)
        variants: list[tuple[str, dict]] = []
        for p in presets:
            if p not in PRESETS:
                raise ConfigError(f"unknown preset {p!r}; known: {', '.join(PRESETS)}")
            variants.extend((n, dict(o)) for n, o in PRESETS[p])
        variants.extend((n, per_variant[n]) for n in order)
        built = [(n, TrainConfig.from_dict({**base.to_dict(), **o})) for n, o in variants]
        return cls(base, check_variants(built), seeds or (base.seed,))

    @classmethod
    def from_text(cls, text, path=None) -> "AblationMatrix":
        from .config import parse_kv
        return cls.from_dict(parse_kv(text, path))

    @classmethod
    def load(cls, path) -> "AblationMatrix":
        path = Path(path)
        return cls.from_text(path.read_text(), path)


def check_variants(variants):
    names = [n for n, _ in variants]
    dup = sorted({n for n in names if names.count(n) > 1})
    if dup:
        raise ConfigError(f"duplicate variant names: {', '.join(dup)}")
    if not variants:
        raise ConfigError("ablation matrix has no variants")
    return list(variants)


def stage1_key(config: TrainConfig):
    """Stage-1 training ignores every stage-2-only setting, so variants that
    agree on this key share one stage-1 run."""
    kind, _ = parse_mode(config.fusion_mode)
    c = config.replace(
        fusion_mode=config.fusion_mode if kind == "single" else "full",
        aggregation="attention", injection="on", prompt_source="enhanced", injection_source="original",
        stage2_epochs=0, freeze_voxel_encoder=True, train_token_heads_stage2=True, eval_every=0,
    )
    return c.to_text()


@dataclass
class AblationResult:
    rows: list[dict]
    per_seed: list[dict]
    splits: tuple[str, ...]

    def _csv(self, rows, lead):
        cols = list(lead) + ["fusion_mode", "prompt_source", "injection_source", "injection", "aggregation"]
        cols += [f"{sp}_{m}" for sp in self.splits for m in METRIC_NAMES]
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{100.0 * v:.4f}" if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def to_csv(self) -> str:
        return self._csv(self.rows, ["variant", "n_seeds"])

    def per_seed_csv(self) -> str:
        return self._csv(self.per_seed, ["variant", "seed"])

    def metric(self, variant, split="open_set_test", name="mIoU_i") -> float:
        for r in self.rows:
            if r["variant"] == variant:
                return r[f"{split}_{name}"]
        raise KeyError(variant)


def run_ablation(variants, dataset: Dataset, seeds=None, splits=("val", "open_set_test"),
                 cache: PreparedCache | None = None, stage1_store: dict | None = None) -> AblationResult:
    """Train every variant (stage 1 shared where possible, then stage 2) for
    each seed and evaluate on ``splits``.  Rows average over seeds."""
    if isinstance(variants, AblationMatrix):
        seeds = variants.seeds if seeds is None else seeds
        variants = variants.variants
    variants = check_variants(list(variants))
    cache = cache or PreparedCache()
    stage1_store = {} if stage1_store is None else stage1_store
    per_seed, rows = [], []
    for name, cfg in variants:
        run_seeds = (cfg.seed,) if seeds is None else tuple(seeds)
        collected = []
        for seed in run_seeds:
            c = cfg.replace(seed=seed)
            key = stage1_key(c)
            if key not in stage1_store:
                log.info("stage 1 for %s (seed %d)", name, seed)
                stage1_store[key] = train_stage1(c, dataset, cache=cache).checkpoint
            log.info("stage 2 for %s (seed %d)", name, seed)
            model = train_stage2(c, dataset, stage1_store[key], cache=cache).model
            row = {"variant": name, "seed": seed, **_describe(c)}
            for sp in splits:
                vals = evaluate(model, dataset, sp, cache=cache).values()
                row.update({f"{sp}_{m}": v for m, v in vals.items()})
            per_seed.append(row)
            collected.append(row)
        mean_row = {"variant": name, "n_seeds": len(collected), **_describe(cfg)}
        for sp in splits:
            for m in METRIC_NAMES:
                k = f"{sp}_{m}"
                mean_row[k] = float(np.mean([r[k] for r in collected]))
        rows.append(mean_row)
    return AblationResult(rows, per_seed, tuple(splits))


def _describe(c: TrainConfig) -> dict:
    return {"fusion_mode": c.fusion_mode, "prompt_source": c.prompt_source,
            "injection_source": c.injection_source, "injection": c.injection, "aggregation": c.aggregation}
