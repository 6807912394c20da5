"""Procedural labeled shapes and open-set dataset splits.

Five families (mug, pan, ladle, bottle, table) are built from parametric
surface patches.  Points are sampled uniformly by area; every patch belongs to
one named part, and each affordance is a union of patches (plus, for ``pour``,
a band of wall near the opening, and for ``lift`` a border strip of the
tabletop), so ground-truth masks are exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GenerationError
from .geometry import PointCloud, normalize

FAMILIES = ("mug", "pan", "ladle", "bottle", "table")

# canonical affordance -> synonym (both are valid query words)
LEXICON = {
    "grasp": "hold",
    "contain": "fill",
    "pour": "tip",
    "support": "place",
    "lift": "raise",
}

PART_WORDS = {
    "body": "the body",
    "interior": "the interior",
    "handle": "the handle",
    "bowl": "the bowl",
    "neck": "the neck",
    "top": "the top",
    "legs": "the legs",
}

SPLITS = ("stage1_train", "stage2_train", "val", "open_set_test")

# documented parameter ranges (object units, z up, object resting on z=0)
PARAM_RANGES = {
    "mug": {"radius": (0.30, 0.45), "height": (0.70, 1.10), "wall": (0.05, 0.08),
            "handle_major": (0.18, 0.28), "handle_minor": (0.03, 0.05)},
    "pan": {"radius": (0.50, 0.80), "height": (0.12, 0.25), "wall": (0.04, 0.07),
            "handle_length": (0.60, 1.00), "handle_radius": (0.03, 0.05)},
    "ladle": {"radius": (0.20, 0.30), "wall": (0.03, 0.05), "handle_length": (1.00, 1.50),
              "handle_radius": (0.02, 0.035), "handle_tilt": (math.radians(55), math.radians(75))},
    "bottle": {"radius": (0.20, 0.30), "body_height": (0.60, 0.90), "shoulder_height": (0.10, 0.20),
               "neck_radius": (0.06, 0.10), "neck_height": (0.15, 0.30)},
    "table": {"half_width": (0.60, 1.00), "half_depth": (0.40, 0.80), "thickness": (0.03, 0.06),
              "height": (0.60, 0.90), "leg_radius": (0.03, 0.05)},
}

POUR_BAND = 0.15
EDGE_BAND = 0.2  # fraction of the shorter tabletop half-extent


@dataclass(frozen=True)
class ShapeSpec:
    family: str
    params: dict
    seed: int

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise GenerationError(f"unknown family {self.family!r}")


def random_spec(family, seed) -> ShapeSpec:
    rng = np.random.default_rng([seed, FAMILIES.index(family), 17])
    params = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in PARAM_RANGES[family].items()}
    return ShapeSpec(family, params, seed)


# ---------------------------------------------------------------- surface patches


@dataclass
class Patch:
    name: str
    part: str
    area: float
    sampler: object  # callable(rng, n) -> n x 3

    def sample(self, rng, n):
        if n == 0:
            return np.zeros((0, 3))
        return self.sampler(rng, n)


def _cyl_wall(r, z0, z1):
    def s(rng, n):
        th = rng.uniform(0, 2 * np.pi, n)
        z = rng.uniform(z0, z1, n)
        return np.stack([r * np.cos(th), r * np.sin(th), z], axis=1)

    return 2 * np.pi * r * (z1 - z0), s


def _annulus(r0, r1, z):
    def s(rng, n):
        th = rng.uniform(0, 2 * np.pi, n)
        rr = np.sqrt(rng.uniform(r0 * r0, r1 * r1, n))
        return np.stack([rr * np.cos(th), rr * np.sin(th), np.full(n, z)], axis=1)

    return np.pi * (r1 * r1 - r0 * r0), s


def _frustum(r0, r1, z0, z1):
    def s(rng, n):
        out = np.empty((0, 3))
        rmax = max(r0, r1)
        while out.shape[0] < n:
            m = 2 * (n - out.shape[0]) + 8
            t = rng.uniform(0, 1, m)
            keep = rng.uniform(0, rmax, m) < r0 + (r1 - r0) * t
            t = t[keep]
            th = rng.uniform(0, 2 * np.pi, t.size)
            r = r0 + (r1 - r0) * t
            out = np.concatenate([out, np.stack([r * np.cos(th), r * np.sin(th), z0 + (z1 - z0) * t], axis=1)])
        return out[:n]

    slant = math.hypot(r1 - r0, z1 - z0)
    return np.pi * (r0 + r1) * slant, s


def _torus_arc(center, major, minor, phi0, phi1):
    """Tube around an arc of a circle in the xz-plane."""
    cx, cy, cz = center

    def s(rng, n):
        out = np.empty((0, 3))
        while out.shape[0] < n:
            m = 2 * (n - out.shape[0]) + 8
            phi = rng.uniform(phi0, phi1, m)
            th = rng.uniform(0, 2 * np.pi, m)
            keep = rng.uniform(0, major + minor, m) < major + minor * np.cos(th)
            phi, th = phi[keep], th[keep]
            rho = major + minor * np.cos(th)
            pts = np.stack([cx + rho * np.cos(phi), cy + minor * np.sin(th), cz + rho * np.sin(phi)], axis=1)
            out = np.concatenate([out, pts])
        return out[:n]

    return (phi1 - phi0) * major * 2 * np.pi * minor, s


def _rod(p0, p1, radius):
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    axis = p1 - p0
    length = np.linalg.norm(axis)
    u = axis / length
    helper = np.array([0.0, 0.0, 1.0]) if abs(u[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(u, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(u, e1)

    def s(rng, n):
        t = rng.uniform(0, length, n)
        th = rng.uniform(0, 2 * np.pi, n)
        return p0 + t[:, None] * u + radius * (np.cos(th)[:, None] * e1 + np.sin(th)[:, None] * e2)

    return 2 * np.pi * radius * length, s


def _hemisphere(center, r):
    """Lower hemisphere (z <= center z); uniform by Archimedes' projection."""
    c = np.asarray(center, float)

    def s(rng, n):
        z = rng.uniform(-1, 0, n)
        th = rng.uniform(0, 2 * np.pi, n)
        rho = np.sqrt(1 - z * z)
        return c + r * np.stack([rho * np.cos(th), rho * np.sin(th), z], axis=1)

    return 2 * np.pi * r * r, s


def _rect(center, u, v, hu, hv):
    c, u, v = (np.asarray(a, float) for a in (center, u, v))

    def s(rng, n):
        a = rng.uniform(-hu, hu, n)
        b = rng.uniform(-hv, hv, n)
        return c + a[:, None] * u + b[:, None] * v

    return 4 * hu * hv, s


def _patch(name, part, geom):
    area, sampler = geom
    return Patch(name, part, float(area), sampler)


def build_patches(spec: ShapeSpec) -> list[Patch]:
    p = spec.params
    if any(v <= 0 for v in p.values()):
        raise GenerationError(f"non-positive parameter in {spec}")
    f = spec.family
    if f == "mug":
        r, h, t = p["radius"], p["height"], p["wall"]
        if t >= r or t >= h:
            raise GenerationError("mug wall thicker than its radius or height")
        ri = r - t
        return [
            _patch("outer_wall", "body", _cyl_wall(r, 0.0, h)),
            _patch("outer_bottom", "body", _annulus(0.0, r, 0.0)),
            _patch("rim", "body", _annulus(ri, r, h)),
            _patch("inner_wall", "interior", _cyl_wall(ri, t, h)),
            _patch("inner_bottom", "interior", _annulus(0.0, ri, t)),
            _patch("handle", "handle", _torus_arc((r, 0.0, h / 2), p["handle_major"], p["handle_minor"],
                                                  -np.pi / 2, np.pi / 2)),
        ]
    if f == "pan":
        r, h, t = p["radius"], p["height"], p["wall"]
        if t >= r or t >= h:
            raise GenerationError("pan wall thicker than its radius or height")
        ri = r - t
        zh = 0.8 * h
        return [
            _patch("outer_wall", "body", _cyl_wall(r, 0.0, h)),
            _patch("outer_bottom", "body", _annulus(0.0, r, 0.0)),
            _patch("rim", "body", _annulus(ri, r, h)),
            _patch("inner_wall", "interior", _cyl_wall(ri, t, h)),
            _patch("inner_bottom", "interior", _annulus(0.0, ri, t)),
            _patch("handle", "handle", _rod((r, 0.0, zh), (r + p["handle_length"], 0.0, zh + 0.1 * h),
                                             p["handle_radius"])),
        ]
    if f == "ladle":
        r, t = p["radius"], p["wall"]
        if t >= r:
            raise GenerationError("ladle wall thicker than its radius")
        c = (0.0, 0.0, r)
        tilt = p["handle_tilt"]
        start = np.array([r, 0.0, r])
        end = start + p["handle_length"] * np.array([math.cos(tilt), 0.0, math.sin(tilt)])
        return [
            _patch("outer_bowl", "bowl", _hemisphere(c, r)),
            _patch("rim", "bowl", _annulus(r - t, r, r)),
            _patch("inner_bowl", "interior", _hemisphere(c, r - t)),
            _patch("handle", "handle", _rod(start, end, p["handle_radius"])),
        ]
    if f == "bottle":
        r, hb, hs = p["radius"], p["body_height"], p["shoulder_height"]
        rn, hn = p["neck_radius"], p["neck_height"]
        if rn >= r:
            raise GenerationError("bottle neck wider than its body")
        return [
            _patch("body_wall", "body", _cyl_wall(r, 0.0, hb)),
            _patch("bottom", "body", _annulus(0.0, r, 0.0)),
            _patch("shoulder", "body", _frustum(r, rn, hb, hb + hs)),
            _patch("neck_wall", "neck", _cyl_wall(rn, hb + hs, hb + hs + hn)),
            _patch("mouth", "neck", _annulus(0.6 * rn, rn, hb + hs + hn)),
        ]
    if f == "table":
        hw, hd, th, H, lr = (p[k] for k in ("half_width", "half_depth", "thickness", "height", "leg_radius"))
        if H <= th or lr * 4 >= min(hw, hd):
            raise GenerationError("degenerate table proportions")
        ex, ey, ez = np.eye(3)
        zc = H - th / 2
        patches = [
            _patch("top_upper", "top", _rect((0, 0, H), ex, ey, hw, hd)),
            _patch("top_lower", "top", _rect((0, 0, H - th), ex, ey, hw, hd)),
            _patch("top_side_x+", "top", _rect((hw, 0, zc), ey, ez, hd, th / 2)),
            _patch("top_side_x-", "top", _rect((-hw, 0, zc), ey, ez, hd, th / 2)),
            _patch("top_side_y+", "top", _rect((0, hd, zc), ex, ez, hw, th / 2)),
            _patch("top_side_y-", "top", _rect((0, -hd, zc), ex, ez, hw, th / 2)),
        ]
        inset = 2 * lr
        for i, (sx, sy) in enumerate([(1, 1), (1, -1), (-1, 1), (-1, -1)]):
            x, y = sx * (hw - inset), sy * (hd - inset)
            patches.append(_patch(f"leg{i}", "legs", _rod((x, y, 0.0), (x, y, H - th), lr)))
        return patches
    raise GenerationError(f"unknown family {f!r}")


FAMILY_AFFORDANCES = {
    "mug": ("grasp", "contain", "pour"),
    "pan": ("grasp", "contain", "pour"),
    "ladle": ("grasp", "contain", "pour"),
    "bottle": ("grasp", "pour"),
    "table": ("support", "lift"),
}


def _opening_height(spec):
    p = spec.params
    if spec.family in ("mug", "pan"):
        return p["height"]
    if spec.family == "ladle":
        return p["radius"]
    raise GenerationError(f"{spec.family} has no opening")


def affordance_mask(spec: ShapeSpec, patch_names: np.ndarray, local: np.ndarray, affordance: str) -> np.ndarray:
    """Exact mask from the generating patch of each point (and its clean local
    coordinates for the pour band)."""
    f = spec.family
    names = np.asarray(patch_names)
    isin = lambda *ns: np.isin(names, ns)  # noqa: E731
    if affordance not in FAMILY_AFFORDANCES[f]:
        raise GenerationError(f"{f} has no affordance {affordance!r}")
    if affordance == "grasp":
        return isin("body_wall") if f == "bottle" else isin("handle")
    if affordance == "contain":
        return isin("inner_wall", "inner_bottom", "inner_bowl")
    if affordance == "pour":
        if f == "bottle":
            return isin("neck_wall", "mouth")
        top = _opening_height(spec)
        depth = top if f != "ladle" else spec.params["radius"]
        band = local[:, 2] >= top - POUR_BAND * depth
        walls = isin("outer_wall", "inner_wall", "outer_bowl", "inner_bowl")
        return isin("rim") | (walls & band)
    if affordance == "support":
        return isin("top_upper")
    if affordance == "lift":
        hw, hd = spec.params["half_width"], spec.params["half_depth"]
        b = EDGE_BAND * min(hw, hd)
        edge = (np.abs(local[:, 0]) >= hw - b) | (np.abs(local[:, 1]) >= hd - b)
        return isin("top_side_x+", "top_side_x-", "top_side_y+", "top_side_y-") | (isin("top_upper", "top_lower") & edge)
    raise GenerationError(f"unknown affordance {affordance!r}")


# ---------------------------------------------------------------- samples


@dataclass
class Record:
    query: str
    mask: np.ndarray
    cls: str


@dataclass
class Sample:
    spec: ShapeSpec
    cloud: PointCloud
    local_points: np.ndarray
    patch_names: np.ndarray
    part_names: tuple[str, ...]
    part_labels: np.ndarray
    affordance_records: list[Record]
    split: str = ""
    sample_id: int = 0

    def part_records(self) -> list[Record]:
        recs = []
        for i, part in enumerate(self.part_names):
            recs.append(Record(PART_WORDS[part], self.part_labels == i, part))
        return recs

    def records_for_split(self, holdout=()) -> list[Record]:
        fam = self.spec.family
        if self.split == "stage1_train":
            return self.part_records()
        held = {a for f, a in holdout if f == fam}
        if self.split == "open_set_test":
            return [r for r in self.affordance_records if r.cls in held]
        return [r for r in self.affordance_records if r.cls not in held]


def generate(spec: ShapeSpec, n_points=2048, noise=0.005, random_yaw=True) -> Sample:
    if n_points < 256:
        raise GenerationError(f"n_points must be >= 256, got {n_points}")
    patches = build_patches(spec)
    rng = np.random.default_rng([spec.seed, FAMILIES.index(spec.family), 29])
    # two guaranteed points per patch keep every part mask non-empty
    base = 2
    areas = np.array([pt.area for pt in patches])
    counts = base + rng.multinomial(n_points - base * len(patches), areas / areas.sum())
    local, names = [], []
    for patch, n in zip(patches, counts):
        local.append(patch.sample(rng, int(n)))
        names.extend([patch.name] * int(n))
    local = np.concatenate(local)
    names = np.array(names)
    # shuffle so point order carries no part information
    perm = rng.permutation(n_points)
    local, names = local[perm], names[perm]

    world = local.copy()
    if random_yaw:
        a = rng.uniform(0, 2 * np.pi)
        c, s = math.cos(a), math.sin(a)
        world = world @ np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    if noise > 0:
        world = world + rng.normal(0.0, noise, world.shape)
    cloud = normalize(world)

    part_of = {pt.name: pt.part for pt in patches}
    part_names = tuple(dict.fromkeys(pt.part for pt in patches))
    part_labels = np.array([part_names.index(part_of[n]) for n in names])

    records = []
    for aff in FAMILY_AFFORDANCES[spec.family]:
        word = aff if rng.uniform() < 0.5 else LEXICON[aff]
        records.append(Record(word, affordance_mask(spec, names, local, aff), aff))
    for r in records:
        if r.mask.all() or not r.mask.any():
            raise GenerationError(f"degenerate {r.cls} mask for {spec}")
    return Sample(spec, cloud, local, names, part_names, part_labels, records)


# ---------------------------------------------------------------- splits


@dataclass
class DatasetManifest:
    seed: int
    n_points: int
    holdout: tuple[tuple[str, str], ...]
    samples: list[Sample] = field(default_factory=list)

    def records(self, split=None):
        """``(sample, record)`` pairs, optionally limited to one split."""
        out = []
        for s in self.samples:
            if split is None or s.split == split:
                out.extend((s, r) for r in s.records_for_split(self.holdout))
        return out

    def split_sizes(self) -> dict[str, int]:
        return {sp: len(self.records(sp)) for sp in SPLITS}

    def combinations(self, split) -> set[tuple[str, str]]:
        return {(s.spec.family, r.cls) for s, r in self.records(split)}


def parse_holdout(items) -> tuple[tuple[str, str], ...]:
    out = []
    for item in items:
        if isinstance(item, str):
            if ":" not in item:
                raise ConfigError(f"holdout entries look like family:affordance, got {item!r}")
            fam, aff = item.split(":", 1)
        else:
            fam, aff = item
        fam, aff = fam.strip(), aff.strip()
        if fam not in FAMILIES or aff not in FAMILY_AFFORDANCES[fam]:
            raise ConfigError(f"({fam}, {aff}) is not a valid family/affordance combination")
        out.append((fam, aff))
    return tuple(sorted(set(out)))


DEFAULT_FRACTIONS = {"stage1_train": 0.3, "stage2_train": 0.5, "val": 0.1, "open_set_test": 0.1}


def make_splits(n_samples, seed, holdout, n_points=2048, fractions=None, noise=0.005) -> DatasetManifest:
    holdout = parse_holdout(holdout)
    if not holdout:
        raise ConfigError("open-set evaluation needs at least one held-out combination")
    if n_samples < 1:
        raise ConfigError("n_samples must be positive")
    for fam in {f for f, _ in holdout}:
        held = {a for f, a in holdout if f == fam}
        if held >= set(FAMILY_AFFORDANCES[fam]):
            raise ConfigError(f"holdout covers every affordance of {fam}")
    # held-out queries must share a word with some training query
    trained = {a for fam, affs in FAMILY_AFFORDANCES.items() for a in affs if (fam, a) not in holdout}
    for fam, aff in holdout:
        if aff not in trained:
            raise ConfigError(f"held-out affordance {aff!r} never appears in training, so its query is unseen")

    fractions = dict(DEFAULT_FRACTIONS if fractions is None else fractions)
    rng = np.random.default_rng([seed, 7919])
    counts = {sp: int(math.floor(fractions.get(sp, 0.0) * n_samples)) for sp in SPLITS}
    counts["stage2_train"] += n_samples - sum(counts.values())
    labels = np.array([sp for sp in SPLITS for _ in range(counts[sp])])
    labels = labels[rng.permutation(n_samples)]

    holdout_fams = sorted({f for f, _ in holdout})
    offset = int(rng.integers(len(FAMILIES)))
    manifest = DatasetManifest(seed, n_points, holdout)
    test_i = other_i = 0
    for i, split in enumerate(labels):
        if split == "open_set_test":
            fam = holdout_fams[test_i % len(holdout_fams)]
            test_i += 1
        else:
            fam = FAMILIES[(other_i + offset) % len(FAMILIES)]
            other_i += 1
        sample_seed = int(np.random.default_rng([seed, i]).integers(2**31))
        sample = generate(random_spec(fam, sample_seed), n_points, noise=noise)
        sample.split = str(split)
        sample.sample_id = i
        manifest.samples.append(sample)
    assert not (manifest.combinations("open_set_test") & manifest.combinations("stage2_train"))
    return manifest
