"""Command-line entry point: ``voxafford gen|train|eval|predict|ablate``.

Every command writes ``run.json`` into its output location recording the
command line, seed, inputs and hashes of the files it produced.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .config import TrainConfig
from .datasets import Dataset, read_cloud, write_prediction
from .errors import (ConfigError, EvaluationError, GenerationError, InputError, NumericError, ParseError,
                     TrainingError, VoxAffordError)
from .model import prepare_cloud
from .synthdata import make_splits

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_PARSE = 4
EXIT_NUMERIC = 5
EXIT_CONFIG = 6
EXIT_EVALUATION = 7
EXIT_OTHER = 1


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    seed: int | None
    config_path: str | None
    dataset_path: str | None
    output: str
    timestamp: str = field(default_factory=lambda: _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"))
    artifacts: dict[str, str] = field(default_factory=dict)

    def add(self, *paths):
        for p in paths:
            p = Path(p)
            self.artifacts[str(p)] = hashlib.sha256(p.read_bytes()).hexdigest()

    def write(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def _load_config(path, seed=None) -> TrainConfig:
    cfg = TrainConfig() if path is None else TrainConfig.load(path)
    return cfg if seed is None else cfg.replace(seed=seed)


def _out_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {path}: {exc.strerror}") from None
    return path


def cmd_gen(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be a positive integer")
    if args.points < 256:
        raise UsageError("--points must be at least 256")
    out = _out_dir(args.out)
    manifest = make_splits(args.n, args.seed, args.holdout, n_points=args.points, noise=args.noise)
    ds = Dataset.from_manifest(manifest)
    ds.write(out)
    run = RunManifest("gen", sys.argv[1:] if args.argv is None else args.argv, args.seed, None, None, str(out))
    run.add(out / "manifest.tsv", out / "dataset.json")
    run.write(out / "run.json")
    print(f"wrote {len(ds.items)} samples to {out}: " +
          ", ".join(f"{k}={v}" for k, v in ds.split_sizes().items()))
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import Checkpoint, history_csv, train_stage

    if args.stage == 2 and not args.init:
        raise UsageError("stage 2 requires --init <stage-1 checkpoint directory>")
    cfg = _load_config(args.config, args.seed)
    ds = Dataset.read(args.data)
    init = Checkpoint.load(args.init) if args.init else None
    res = train_stage(cfg, ds, args.stage, init, eval_split="val" if ds.split("val") else None)
    out = _out_dir(args.out)
    res.checkpoint.save(out)
    (out / "metrics.csv").write_text(history_csv(res.checkpoint.history))
    run = RunManifest("train", args.argv or sys.argv[1:], cfg.seed, args.config, args.data, str(out))
    run.add(out / "params.bin", out / "params.manifest", out / "metrics.csv")
    run.write(out / "run.json")
    print(f"stage {args.stage}: {res.checkpoint.step} steps, final loss "
          f"{res.losses[-1] if res.losses else float('nan'):.5f}; checkpoint in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .trainer import Checkpoint, evaluate, evaluate_oracle

    ds = Dataset.read(args.data)
    if args.oracle:
        report = evaluate_oracle(ds, args.split)
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint (or --oracle)")
        report = evaluate(Checkpoint.load(args.checkpoint), ds, args.split)
    out = _out_dir(args.out)
    (out / f"{args.split}_metrics.json").write_text(report.to_json() + "\n")
    (out / f"{args.split}_metrics.csv").write_text(report.to_csv())
    run = RunManifest("eval", args.argv or sys.argv[1:], None, None, args.data, str(out))
    run.add(out / f"{args.split}_metrics.json", out / f"{args.split}_metrics.csv")
    run.write(out / "run.json")
    print(report.to_csv(), end="")
    return EXIT_OK


def cmd_predict(args) -> int:
    from .trainer import Checkpoint, build_model

    if not args.query.strip():
        raise UsageError("--query must not be empty")
    ckpt = Checkpoint.load(args.checkpoint)
    points, _ = read_cloud(args.cloud)
    model = build_model(ckpt.config, ckpt)
    mask = model.predict(prepare_cloud(points, ckpt.config), [args.query])[0]
    out = Path(args.out)
    if out.parent != Path(""):
        _out_dir(out.parent)
    path, side = write_prediction(out, mask)
    run = RunManifest("predict", args.argv or sys.argv[1:], ckpt.config.seed, None, None, str(out))
    run.add(path, side)
    run.write(out.with_name(out.name + ".run.json"))
    print(f"{int(mask.binary.sum())}/{len(mask.probabilities)} points above {mask.threshold}, "
          f"confidence {mask.confidence:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .trainer import AblationMatrix, run_ablation

    matrix = AblationMatrix.load(args.config)
    if args.seeds:
        matrix.seeds = tuple(int(s) for s in args.seeds.split(","))
    ds = Dataset.read(args.data)
    res = run_ablation(matrix, ds)
    out = _out_dir(args.out)
    (out / "ablation.csv").write_text(res.to_csv())
    (out / "ablation_per_seed.csv").write_text(res.per_seed_csv())
    run = RunManifest("ablate", args.argv or sys.argv[1:], None, args.config, args.data, str(out))
    run.add(out / "ablation.csv", out / "ablation_per_seed.csv")
    run.write(out / "run.json")
    print(res.to_csv(), end="")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="voxafford", description="Voxel-enhanced affordance segmentation on synthetic shapes.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, required=True, help="number of objects")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--holdout", action="append", required=True, metavar="FAMILY:AFFORDANCE",
                   help="held-out combination (repeatable)")
    g.add_argument("--points", type=int, default=2048)
    g.add_argument("--noise", type=float, default=0.005)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--init", help="checkpoint directory to start from (required for stage 2)")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    e.add_argument("--checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="open_set_test")
    e.add_argument("--out", required=True)
    e.add_argument("--oracle", action="store_true", help="score ground truth against itself")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="predict a mask for one cloud and query")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--cloud", required=True)
    r.add_argument("--query", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_predict)

    a = sub.add_parser("ablate", help="train and compare the variants of an ablation matrix")
    a.add_argument("--config", required=True, help="matrix file (base keys, preset=..., variant.<name>.<key>=...)")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", help="comma-separated seeds overriding the matrix")
    a.set_defaults(func=cmd_ablate)
    return p


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, ParseError):
        return EXIT_PARSE
    if isinstance(exc, (OSError, FileNotFoundError)):
        return EXIT_IO
    if isinstance(exc, (NumericError, TrainingError)):
        return EXIT_NUMERIC
    if isinstance(exc, (ConfigError, GenerationError, InputError)):
        return EXIT_CONFIG
    if isinstance(exc, EvaluationError):
        return EXIT_EVALUATION
    return EXIT_OTHER


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        args.argv = argv
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(message)s")
        return args.func(args)
    except (UsageError, VoxAffordError, OSError) as exc:
        code = exit_code(exc)
        kind = "usage" if code == EXIT_USAGE else type(exc).__name__
        print(f"voxafford: {kind}: {exc}", file=sys.stderr)
        return code
