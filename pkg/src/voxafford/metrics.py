"""Class-level and instance-level segmentation metrics.

Class level (points pooled per class): mIoU_c, Acc_c, mAcc_c.
Instance level (one query/object pair per instance): mIoU_i, mAcc_i,
mPrec_i, mRec_i and mAP50_i.  Samples whose class is ``none`` are dropped
before anything is computed.

Empty-mask conventions: IoU, precision and recall are 1 when prediction and
ground truth are both empty and 0 when exactly one of them is.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import EvaluationError

NONE_CLASS = "none"
METRIC_NAMES = ("mIoU_c", "Acc_c", "mAcc_c", "mIoU_i", "mAcc_i", "mPrec_i", "mRec_i", "mAP50_i")


def _bool(x):
    return np.asarray(x, dtype=bool).reshape(-1)


def iou(pred, gt) -> float:
    pred, gt = _bool(pred), _bool(gt)
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def precision(pred, gt) -> float:
    pred, gt = _bool(pred), _bool(gt)
    npred, ngt = pred.sum(), gt.sum()
    if npred == 0 and ngt == 0:
        return 1.0
    if npred == 0 or ngt == 0:
        return 0.0
    return np.count_nonzero(pred & gt) / npred


def recall(pred, gt) -> float:
    pred, gt = _bool(pred), _bool(gt)
    npred, ngt = pred.sum(), gt.sum()
    if npred == 0 and ngt == 0:
        return 1.0
    if npred == 0 or ngt == 0:
        return 0.0
    return np.count_nonzero(pred & gt) / ngt


def accuracy(pred, gt) -> float:
    pred, gt = _bool(pred), _bool(gt)
    return np.count_nonzero(pred == gt) / pred.size


def _unpack_mask(mask):
    if hasattr(mask, "binary"):
        return _bool(mask.binary), float(mask.confidence)
    binary, conf = mask
    return _bool(binary), float(conf)


def _retained(samples):
    return [(i, s) for i, s in enumerate(samples) if s[2] != NONE_CLASS]


def class_metrics(samples) -> dict:
    """``samples``: iterable of ``(pred, gt, class)``."""
    kept = _retained(list(samples))
    if not kept:
        raise EvaluationError("no samples left after excluding the 'none' class")
    per_class: dict[str, dict] = {}
    pooled_correct = pooled_total = 0
    for _, (pred, gt, cls) in kept:
        pred, gt = _bool(pred), _bool(gt)
        if pred.shape != gt.shape:
            raise EvaluationError(f"prediction length {pred.size} != ground-truth length {gt.size}")
        c = per_class.setdefault(cls, {"inter": 0, "union": 0, "correct": 0, "total": 0})
        c["inter"] += np.count_nonzero(pred & gt)
        c["union"] += np.count_nonzero(pred | gt)
        correct = np.count_nonzero(pred == gt)
        c["correct"] += correct
        c["total"] += pred.size
        pooled_correct += correct
        pooled_total += pred.size
    classes = {}
    for cls in sorted(per_class):
        c = per_class[cls]
        classes[cls] = {
            "iou": 1.0 if c["union"] == 0 else c["inter"] / c["union"],
            "acc": c["correct"] / c["total"],
        }
    return {
        "per_class": classes,
        "mIoU_c": float(np.mean([v["iou"] for v in classes.values()])),
        "Acc_c": pooled_correct / pooled_total,
        "mAcc_c": float(np.mean([v["acc"] for v in classes.values()])),
        "n_classes": len(classes),
    }


def average_precision(confidences, ious, ids=None, threshold=0.5) -> float:
    """Ranked AP for one class: rank by confidence (ties by id), count a hit
    when IoU >= threshold, sum delta-recall x precision over the hits."""
    confidences = np.asarray(confidences, dtype=np.float64)
    ious = np.asarray(ious, dtype=np.float64)
    ids = np.arange(len(confidences)) if ids is None else np.asarray(ids)
    n = len(confidences)
    if n == 0:
        raise EvaluationError("average precision of an empty class")
    order = np.lexsort((ids, -confidences))
    hits = ious[order] >= threshold
    tp = np.cumsum(hits)
    prec = tp / np.arange(1, n + 1)
    return float(np.sum(prec[hits]) / n)


def instance_metrics(samples) -> dict:
    """``samples``: iterable of ``(mask, gt, class)`` where ``mask`` has
    ``binary`` and ``confidence`` (or is a ``(binary, confidence)`` pair)."""
    kept = _retained(list(samples))
    if not kept:
        raise EvaluationError("no samples left after excluding the 'none' class")
    rows = []
    for idx, (mask, gt, cls) in kept:
        pred, conf = _unpack_mask(mask)
        gt = _bool(gt)
        if pred.shape != gt.shape:
            raise EvaluationError(f"prediction length {pred.size} != ground-truth length {gt.size}")
        rows.append((idx, cls, conf, iou(pred, gt), accuracy(pred, gt), precision(pred, gt), recall(pred, gt)))
    by_class: dict[str, list] = {}
    for r in rows:
        by_class.setdefault(r[1], []).append(r)
    ap = {
        cls: average_precision([r[2] for r in rs], [r[3] for r in rs], [r[0] for r in rs])
        for cls, rs in sorted(by_class.items())
    }
    cols = np.array([r[3:] for r in rows], dtype=np.float64)
    return {
        "mIoU_i": float(cols[:, 0].mean()),
        "mAcc_i": float(cols[:, 1].mean()),
        "mPrec_i": float(cols[:, 2].mean()),
        "mRec_i": float(cols[:, 3].mean()),
        "mAP50_i": float(np.mean(list(ap.values()))),
        "ap_per_class": ap,
        "n_instances": len(rows),
    }


@dataclass
class MetricsReport:
    class_level: dict
    instance_level: dict
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_masks(cls, masks, gts, classes, **extra):
        inst = instance_metrics(list(zip(masks, gts, classes)))
        clsm = class_metrics([(_unpack_mask(m)[0], g, c) for m, g, c in zip(masks, gts, classes)])
        return cls(clsm, inst, dict(extra))

    def values(self) -> dict[str, float]:
        merged = {**self.class_level, **self.instance_level}
        return {k: float(merged[k]) for k in METRIC_NAMES}

    def to_json(self) -> str:
        payload = {
            "metrics": self.values(),
            "per_class": self.class_level["per_class"],
            "ap_per_class": self.instance_level["ap_per_class"],
            "counts": {
                "instances": self.instance_level["n_instances"],
                "classes": self.class_level["n_classes"],
            },
            **self.extra,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def csv_row(self, scale=100.0) -> dict[str, str]:
        return {k: f"{v * scale:.4f}" for k, v in self.values().items()}

    def to_csv(self, scale=100.0) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(METRIC_NAMES), lineterminator="\n")
        writer.writeheader()
        writer.writerow(self.csv_row(scale))
        return buf.getvalue()
