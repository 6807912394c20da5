"""Brute-force reference implementations used by the tests.

Everything here is written with explicit Python loops over scalars (or the
plainest numpy) and shares no code with the package, so agreement between the
two is evidence rather than tautology.
"""

import math

import numpy as np


def matmul(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def linear(x, w, b):
    return matmul(x, w) + np.asarray(b, float)[None, :]


def softmax_row(v):
    m = max(v)
    e = [math.exp(x - m) for x in v]
    s = sum(e)
    return [x / s for x in e]


def layer_norm(x, gamma, beta, eps=1e-5):
    out = np.zeros_like(np.asarray(x, float))
    for i, row in enumerate(np.asarray(x, float)):
        mu = sum(row) / len(row)
        var = sum((r - mu) ** 2 for r in row) / len(row)
        out[i] = [(r - mu) / math.sqrt(var + eps) * g + b for r, g, b in zip(row, gamma, beta)]
    return out


def gelu(x):
    x = np.asarray(x, float)
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def attention(query, key, value, p, heads):
    """Multi-head attention from a dict of projection arrays
    (wq, bq, wk, bk, wv, bv, wo, bo); query [q, d], key/value [k, d]."""
    q = linear(query, p["wq"], p["bq"])
    k = linear(key, p["wk"], p["bk"])
    v = linear(value, p["wv"], p["bv"])
    d = q.shape[1]
    dh = d // heads
    mixed = np.zeros((q.shape[0], d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(q.shape[0]):
            scores = [sum(q[i, sl] * k[j, sl]) / math.sqrt(dh) for j in range(k.shape[0])]
            w = softmax_row(scores)
            for j in range(k.shape[0]):
                mixed[i, sl] += w[j] * v[j, sl]
    return linear(mixed, p["wo"], p["bo"])


def attention_params(attn):
    """Pull projection arrays out of a package CrossAttention module."""
    return {
        "wq": attn.q_proj.weight.data, "bq": attn.q_proj.bias.data,
        "wk": attn.k_proj.weight.data, "bk": np.zeros(attn.d),
        "wv": attn.v_proj.weight.data, "bv": attn.v_proj.bias.data,
        "wo": attn.out_proj.weight.data, "bo": attn.out_proj.bias.data,
    }


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


# ---------------------------------------------------------------- geometry

def voxel_occupancy(points, resolution):
    """{(i, j, k): count} from a per-point floor with clamping."""
    occ = {}
    for p in points:
        idx = []
        for c in p:
            i = math.floor((c + 1.0) / 2.0 * resolution)
            idx.append(min(max(i, 0), resolution - 1))
        occ[tuple(idx)] = occ.get(tuple(idx), 0) + 1
    return occ


def knn(points, k):
    n = len(points)
    out = []
    for i in range(n):
        others = []
        for j in range(n):
            if j == i:
                continue
            d = sum((points[i][a] - points[j][a]) ** 2 for a in range(3))
            others.append((d, j))
        others.sort()
        out.append([i] + [j for _, j in others[: k - 1]])
    return np.array(out)


# ---------------------------------------------------------------- metrics

def _counts(pred, gt):
    tp = fp = fn = tn = 0
    for p, g in zip(pred, gt):
        p, g = bool(p), bool(g)
        tp += p and g
        fp += p and not g
        fn += (not p) and g
        tn += (not p) and (not g)
    return tp, fp, fn, tn


def iou(pred, gt):
    tp, fp, fn, _ = _counts(pred, gt)
    if tp + fp + fn == 0:
        return 1.0
    return tp / (tp + fp + fn)


def precision(pred, gt):
    tp, fp, fn, _ = _counts(pred, gt)
    if tp + fp == 0 and tp + fn == 0:
        return 1.0
    if tp + fp == 0 or tp + fn == 0:
        return 0.0
    return tp / (tp + fp)


def recall(pred, gt):
    tp, fp, fn, _ = _counts(pred, gt)
    if tp + fp == 0 and tp + fn == 0:
        return 1.0
    if tp + fp == 0 or tp + fn == 0:
        return 0.0
    return tp / (tp + fn)


def accuracy(pred, gt):
    tp, fp, fn, tn = _counts(pred, gt)
    return (tp + tn) / (tp + fp + fn + tn)


def ranked_ap(entries, threshold=0.5):
    """``entries``: list of (confidence, iou, id).  Walk the ranking and add
    (recall step) x (precision at that rank) at every hit."""
    ranked = sorted(entries, key=lambda e: (-e[0], e[2]))
    total = len(ranked)
    hits = 0
    ap = 0.0
    prev_recall = 0.0
    for rank, (_, v, _) in enumerate(ranked, start=1):
        if v >= threshold:
            hits += 1
            rec = hits / total
            ap += (rec - prev_recall) * (hits / rank)
            prev_recall = rec
    return ap


def all_metrics(samples):
    """``samples``: list of (pred, gt, cls, confidence).  Returns the eight
    headline metrics, skipping class ``none``."""
    kept = [(i, s) for i, s in enumerate(samples) if s[2] != "none"]
    classes = sorted({s[2] for _, s in kept})
    per_iou, per_acc = [], []
    pooled_ok = pooled_n = 0
    for c in classes:
        tp = fp = fn = tn = 0
        for _, (pred, gt, cls, _) in kept:
            if cls != c:
                continue
            a, b, e, f = _counts(pred, gt)
            tp, fp, fn, tn = tp + a, fp + b, fn + e, tn + f
        per_iou.append(1.0 if tp + fp + fn == 0 else tp / (tp + fp + fn))
        per_acc.append((tp + tn) / (tp + fp + fn + tn))
        pooled_ok += tp + tn
        pooled_n += tp + fp + fn + tn
    inst = [(iou(p, g), accuracy(p, g), precision(p, g), recall(p, g)) for _, (p, g, _, _) in kept]
    aps = []
    for c in classes:
        entries = [(conf, iou(p, g), i) for i, (p, g, cls, conf) in kept if cls == c]
        aps.append(ranked_ap(entries))
    n = len(inst)
    return {
        "mIoU_c": sum(per_iou) / len(per_iou),
        "Acc_c": pooled_ok / pooled_n,
        "mAcc_c": sum(per_acc) / len(per_acc),
        "mIoU_i": sum(r[0] for r in inst) / n,
        "mAcc_i": sum(r[1] for r in inst) / n,
        "mPrec_i": sum(r[2] for r in inst) / n,
        "mRec_i": sum(r[3] for r in inst) / n,
        "mAP50_i": sum(aps) / len(aps),
    }


def random_instance_set(rng, max_points=64, max_classes=5, max_instances=30):
    """Random (pred, gt, cls, confidence) tuples, with empty masks, ties in
    confidence and an occasional ``none`` sample mixed in."""
    n_cls = int(rng.integers(1, max_classes + 1))
    classes = [f"c{i}" for i in range(n_cls)]
    out = []
    for _ in range(int(rng.integers(1, max_instances + 1))):
        n = int(rng.integers(1, max_points + 1))
        gt = rng.random(n) < rng.random()
        if rng.random() < 0.7:
            pred = gt.copy()
            flip = rng.random(n) < rng.random() * 0.6
            pred[flip] = ~pred[flip]
        else:
            pred = rng.random(n) < rng.random()
        conf = float(rng.choice([0.25, 0.5, 0.75])) if rng.random() < 0.3 else float(rng.random())
        cls = "none" if rng.random() < 0.05 else classes[int(rng.integers(n_cls))]
        out.append((pred, gt, cls, conf))
    if all(s[2] == "none" for s in out):
        out.append((np.ones(3, bool), np.ones(3, bool), classes[0], 0.5))
    return out


# ---------------------------------------------------------------- losses

def bce(p, g, clamp=1e-7):
    total = 0.0
    for pi, gi in zip(p, g):
        pi = min(max(pi, clamp), 1 - clamp)
        total += -(gi * math.log(pi) + (1 - gi) * math.log(1 - pi))
    return total / len(p)


def dice(p, g, eps=1.0):
    inter = sum(pi * gi for pi, gi in zip(p, g))
    return 1.0 - (2 * inter + eps) / (sum(p) + sum(g) + eps)
