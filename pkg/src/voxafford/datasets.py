"""Datasets as the trainer sees them, and their plain-text layout on disk.

A dataset directory holds::

    dataset.json          seed, point count, holdout, split sizes
    manifest.tsv          one line per record: split, sample, family, class,
                          query, cloud file, mask file
    clouds/sNNNNN.xyz     "x y z part" per point
    masks/rNNNNNN.mask    one 0/1 per point

Every float is written with 17 significant digits so a write/read round trip
is bit-exact.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError, ParseError
from .synthdata import SPLITS, DatasetManifest, Record

MANIFEST_COLUMNS = ("split", "sample_id", "family", "class", "query", "cloud", "mask")


@dataclass
class CloudItem:
    """One object with every query record that applies to it."""

    sample_id: int
    family: str
    split: str
    points: np.ndarray
    part_labels: np.ndarray
    records: tuple[Record, ...]


@dataclass
class Dataset:
    seed: int
    n_points: int
    holdout: tuple[tuple[str, str], ...]
    items: list[CloudItem]

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest) -> "Dataset":
        items = []
        for s in manifest.samples:
            recs = tuple(s.records_for_split(manifest.holdout))
            items.append(CloudItem(s.sample_id, s.spec.family, s.split, s.cloud.points, s.part_labels, recs))
        return cls(manifest.seed, manifest.n_points, tuple(manifest.holdout), items)

    def split(self, name) -> list[CloudItem]:
        if name not in SPLITS:
            raise InputError(f"unknown split {name!r}; expected one of {SPLITS}")
        return [it for it in self.items if it.split == name and it.records]

    def subset(self, sample_ids) -> "Dataset":
        keep = set(sample_ids)
        return Dataset(self.seed, self.n_points, self.holdout, [it for it in self.items if it.sample_id in keep])

    def split_sizes(self) -> dict[str, int]:
        return {sp: sum(len(it.records) for it in self.items if it.split == sp) for sp in SPLITS}

    def fingerprint(self) -> str:
        """Content hash over every point, mask and label, in item order."""
        h = hashlib.sha256()
        for it in self.items:
            h.update(f"{it.sample_id}|{it.family}|{it.split}|".encode())
            h.update(np.ascontiguousarray(it.points, dtype="<f8").tobytes())
            for r in it.records:
                h.update(f"{r.query}|{r.cls}|".encode())
                h.update(np.packbits(r.mask).tobytes())
        return h.hexdigest()

    def write(self, root) -> Path:
        root = Path(root)
        (root / "clouds").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(exist_ok=True)
        rows = []
        rid = 0
        for it in self.items:
            cloud_name = f"clouds/s{it.sample_id:05d}.xyz"
            write_cloud(root / cloud_name, it.points, it.part_labels)
            for r in it.records:
                mask_name = f"masks/r{rid:06d}.mask"
                write_mask(root / mask_name, r.mask)
                rows.append((it.split, it.sample_id, it.family, r.cls, r.query, cloud_name, mask_name))
                rid += 1
        with open(root / "manifest.tsv", "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(MANIFEST_COLUMNS)
            w.writerows(rows)
        meta = {
            "seed": self.seed,
            "n_points": self.n_points,
            "holdout": [f"{f}:{a}" for f, a in self.holdout],
            "split_records": self.split_sizes(),
            "n_samples": len(self.items),
            "cloud_columns": ["x", "y", "z", "part"],
            "fingerprint": self.fingerprint(),
        }
        (root / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return root

    @classmethod
    def read(cls, root) -> "Dataset":
        root = Path(root)
        meta_path, man_path = root / "dataset.json", root / "manifest.tsv"
        for p in (meta_path, man_path):
            if not p.is_file():
                raise FileNotFoundError(f"dataset file missing: {p}")
        meta = json.loads(meta_path.read_text())
        holdout = tuple(tuple(h.split(":", 1)) for h in meta["holdout"])
        items: dict[int, CloudItem] = {}
        recs: dict[int, list] = {}
        with open(man_path, newline="") as fh:
            reader = csv.reader(fh, delimiter="\t")
            header = next(reader, None)
            if header is None or tuple(header) != MANIFEST_COLUMNS:
                raise ParseError(f"header must be {'/'.join(MANIFEST_COLUMNS)}", man_path, 1)
            for lineno, row in enumerate(reader, start=2):
                if len(row) != len(MANIFEST_COLUMNS):
                    raise ParseError(f"expected {len(MANIFEST_COLUMNS)} tab-separated fields", man_path, lineno)
                split, sid, family, klass, query, cloud_name, mask_name = row
                if split not in SPLITS:
                    raise ParseError(f"unknown split {split!r}", man_path, lineno)
                try:
                    sid = int(sid)
                except ValueError:
                    raise ParseError(f"bad sample id {sid!r}", man_path, lineno) from None
                if sid not in items:
                    pts, labels = read_cloud(root / cloud_name)
                    items[sid] = CloudItem(sid, family, split, pts, labels, ())
                    recs[sid] = []
                mask = read_mask(root / mask_name)
                if mask.size != items[sid].points.shape[0]:
                    raise ParseError(f"mask has {mask.size} points, cloud has {items[sid].points.shape[0]}",
                                     man_path, lineno)
                recs[sid].append(Record(query, mask, klass))
        out = []
        for sid in items:
            it = items[sid]
            it.records = tuple(recs[sid])
            out.append(it)
        return cls(int(meta["seed"]), int(meta["n_points"]), holdout, out)


def write_cloud(path, points, labels=None):
    points = np.asarray(points, dtype=np.float64)
    lines = []
    for i, (x, y, z) in enumerate(points):
        line = f"{x:.17g} {y:.17g} {z:.17g}"
        if labels is not None:
            line += f" {int(labels[i])}"
        lines.append(line)
    Path(path).write_text("\n".join(lines) + "\n")


def read_cloud(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Parse "x y z [label]" lines; returns points and labels (or None)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"cloud file not found: {path}")
    pts, labels = [], []
    width = None
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        fields = line.split()
        if not fields or fields[0].startswith("#"):
            continue
        if len(fields) < 3:
            raise ParseError(f"expected at least 3 numbers, got {len(fields)}", path, lineno)
        if width is None:
            width = len(fields)
        elif len(fields) != width:
            raise ParseError(f"expected {width} columns, got {len(fields)}", path, lineno)
        try:
            xyz = [float(v) for v in fields[:3]]
            label = int(fields[3]) if len(fields) > 3 else None
        except ValueError:
            raise ParseError(f"not a number in {line.strip()!r}", path, lineno) from None
        if not all(np.isfinite(xyz)):
            raise ParseError("non-finite coordinate", path, lineno)
        pts.append(xyz)
        labels.append(label)
    if not pts:
        raise ParseError("cloud file has no points", path, 1)
    lab = np.array(labels, dtype=np.int64) if width and width > 3 else None
    return np.array(pts, dtype=np.float64), lab


def write_mask(path, mask):
    Path(path).write_text("\n".join("1" if m else "0" for m in np.asarray(mask, dtype=bool)) + "\n")


def read_mask(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"mask file not found: {path}")
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        v = line.strip()
        if v not in ("0", "1"):
            raise ParseError(f"mask lines must be 0 or 1, got {v!r}", path, lineno)
        out.append(v == "1")
    return np.array(out, dtype=bool)


def write_prediction(path, mask) -> tuple[Path, Path]:
    """Probabilities one per line, plus a JSON sidecar next to them."""
    path = Path(path)
    path.write_text("\n".join(f"{p:.17g}" for p in mask.probabilities) + "\n")
    side = path.with_name(path.name + ".json")
    side.write_text(json.dumps({
        "query": mask.query,
        "threshold": mask.threshold,
        "confidence": float(mask.confidence),
        "n_points": int(len(mask.probabilities)),
        "n_positive": int(mask.binary.sum()),
    }, indent=2, sort_keys=True) + "\n")
    return path, side


def overfit_dataset(n_samples, seed=0, n_points=512, noise=0.005) -> Dataset:
    """``n_samples`` objects (families cycled) used for both stages: part
    queries in ``stage1_train`` and affordance queries in ``stage2_train``."""
    from .synthdata import FAMILIES, generate, random_spec

    items = []
    for i in range(n_samples):
        fam = FAMILIES[i % len(FAMILIES)]
        s = generate(random_spec(fam, int(np.random.default_rng([seed, i]).integers(2**31))), n_points, noise=noise)
        items.append(CloudItem(i, fam, "stage1_train", s.cloud.points, s.part_labels, tuple(s.part_records())))
        items.append(CloudItem(i, fam, "stage2_train", s.cloud.points, s.part_labels, tuple(s.affordance_records)))
    return Dataset(seed, n_points, (), items)
