"""Synthetic long-tail scenes standing in for an object detector and its
annotations.

Scenes are grown one object at a time: a predicate is drawn from a Zipf
distribution, a rulebook entry for it picks the class pair and the geometric
relation, and the new object's box is placed relative to an existing anchor.
Placements that would make any other pair satisfy a rule are rejected, so
the ground-truth triplets are exactly the pairs the rulebook labels.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .graph import Detection

log = logging.getLogger(__name__)

DATASET_VERSION = 1
PRECONDITIONS = ("overlap", "above", "contains", "near")
SYMMETRIC = {"overlap", "near"}

ABOVE_MAX_GAP = 0.12
NEAR_MAX_GAP = 0.08
MIN_SIDE = 0.03


class WorldError(ValueError):
    pass


# -- geometry --------------------------------------------------------------

def _x_overlap(a, b) -> float:
    return min(a[2], b[2]) - max(a[0], b[0])


def _y_overlap(a, b) -> float:
    return min(a[3], b[3]) - max(a[1], b[1])


def _inside(inner, outer) -> bool:
    return (inner[0] >= outer[0] and inner[1] >= outer[1]
            and inner[2] <= outer[2] and inner[3] <= outer[3])


def geometric_relation(s: Sequence[float], o: Sequence[float]) -> str | None:
    """Classify the subject->object layout into at most one precondition.

    ``contains``: o lies within s.  ``overlap``: positive intersection with
    neither box inside the other.  ``above``: disjoint, horizontally
    overlapping, s's bottom at most a small gap over o's top (y grows down).
    ``near``: disjoint, side by side, gap at most a small distance.
    """
    xo, yo = _x_overlap(s, o), _y_overlap(s, o)
    if xo > 0 and yo > 0:
        if _inside(o, s):
            return "contains"
        if _inside(s, o):
            return None
        return "overlap"
    if xo > 0:
        gap = o[1] - s[3]
        if 0 <= gap <= ABOVE_MAX_GAP:
            return "above"
        return None
    if yo > 0 and -xo <= NEAR_MAX_GAP:
        return "near"
    return None


# -- world -----------------------------------------------------------------

@dataclass
class WorldSpec:
    n_obj_classes: int = 5
    n_rel_classes: int = 6
    zipf_exponent: float = 1.0
    rulebook: list = field(default_factory=list)
    d_o: int = 16
    seed: int = 0
    feature_noise: float = 0.1
    min_objects: int = 4
    max_objects: int = 7

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rulebook"] = [list(r) for r in self.rulebook]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        d = dict(d)
        d["rulebook"] = [tuple(r) for r in d.get("rulebook", [])]
        return cls(**d)

    @property
    def n_predicates(self) -> int:
        return self.n_rel_classes - 1


@dataclass
class World:
    spec: WorldSpec
    prototypes: np.ndarray
    rules: dict

    @property
    def predicate_probs(self) -> np.ndarray:
        return zipf_probs(self.spec.n_predicates, self.spec.zipf_exponent)

    def label(self, cls_s: int, cls_o: int, box_s, box_o) -> int:
        kind = geometric_relation(box_s, box_o)
        if kind is None:
            return 0
        return self.rules.get((cls_s, cls_o, kind), 0)

    def entries_for(self, predicate: int) -> list[tuple[int, int, int, str]]:
        return [r for r in self.spec.rulebook if r[2] == predicate]


def zipf_probs(n: int, s: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** (-float(s))
    return w / w.sum()


def _make_prototypes(n: int, d: int, rng: np.random.Generator, retries: int = 200) -> np.ndarray:
    for _ in range(retries):
        p = rng.standard_normal((n, d))
        p /= np.linalg.norm(p, axis=1, keepdims=True)
        cos = p @ p.T
        np.fill_diagonal(cos, -1.0)
        if cos.max() < 0.9:
            return p
    raise WorldError(f"could not separate {n} prototypes in {d} dimensions")


def _make_rulebook(spec: WorldSpec, rng: np.random.Generator) -> list[tuple]:
    """Up to one entry per (predicate, subject class) with unique (s, o, kind)
    slots; every predicate gets at least one entry."""
    used: set[tuple[int, int, str]] = set()
    book = []
    C = spec.n_obj_classes
    for p in range(1, spec.n_rel_classes):
        for cs in range(C):
            slots = [
                (cs, co, kind)
                for co in range(C) for kind in PRECONDITIONS
                if (cs, co, kind) not in used
                and not (kind in SYMMETRIC and (co == cs or (co, cs, kind) in used))
            ]
            if not slots:
                continue
            cs_, co, kind = slots[rng.integers(len(slots))]
            used.add((cs_, co, kind))
            book.append((cs_, co, p, kind))
    missing = set(range(1, spec.n_rel_classes)) - {e[2] for e in book}
    if missing:
        raise WorldError(f"rulebook slots exhausted before predicates {sorted(missing)}; "
                         "add object classes")
    return book


def validate_rulebook(spec: WorldSpec) -> dict:
    rules = {}
    for entry in spec.rulebook:
        cs, co, p, kind = entry
        if not 1 <= p <= spec.n_rel_classes - 1:
            raise WorldError(f"predicate {p} outside [1, {spec.n_rel_classes - 1}]")
        if kind not in PRECONDITIONS:
            raise WorldError(f"unknown precondition {kind!r}")
        if not (0 <= cs < spec.n_obj_classes and 0 <= co < spec.n_obj_classes):
            raise WorldError(f"class index out of range in {entry}")
        if (cs, co, kind) in rules:
            raise WorldError(f"two predicates for slot {(cs, co, kind)}")
        rules[(cs, co, kind)] = p
    return rules


def generate_world(spec: WorldSpec) -> World:
    """Prototypes and rulebook for ``spec``; an empty rulebook is generated
    from the seed."""
    if spec.n_obj_classes < 2 or spec.n_rel_classes < 2:
        raise WorldError("need >= 2 object classes and >= 2 relation classes")
    if spec.zipf_exponent < 0:
        raise WorldError("zipf exponent must be >= 0")
    rng = np.random.default_rng([spec.seed, 0x5EED])
    protos = _make_prototypes(spec.n_obj_classes, spec.d_o, rng)
    if not spec.rulebook:
        spec = WorldSpec.from_dict({**spec.to_dict(), "rulebook": _make_rulebook(spec, rng)})
    rules = validate_rulebook(spec)
    return World(spec=spec, prototypes=protos, rules=rules)


# -- scenes ----------------------------------------------------------------

@dataclass(frozen=True)
class SceneSample:
    detections: tuple[Detection, ...]
    gt_triplets: tuple[tuple[int, int, int], ...]
    split: str = "train"

    def __post_init__(self):
        ids = {d.id for d in self.detections}
        if len(set(self.gt_triplets)) != len(self.gt_triplets):
            raise WorldError("duplicate ground-truth triplet")
        for s, o, _ in self.gt_triplets:
            if s not in ids or o not in ids:
                raise WorldError(f"triplet ({s}, {o}) references a missing detection")

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "detections": [d.to_dict() for d in self.detections],
            "triplets": [list(t) for t in self.gt_triplets],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSample":
        return cls(
            detections=tuple(Detection.from_dict(x) for x in d["detections"]),
            gt_triplets=tuple(tuple(int(v) for v in t) for t in d["triplets"]),
            split=d.get("split", "train"),
        )


def _random_box(rng) -> tuple:
    w, h = rng.uniform(0.12, 0.3, size=2)
    x1 = rng.uniform(0, 1 - w)
    y1 = rng.uniform(0, 1 - h)
    return (x1, y1, x1 + w, y1 + h)


def _valid(b) -> bool:
    return (0 <= b[0] and 0 <= b[1] and b[2] <= 1 and b[3] <= 1
            and b[2] - b[0] >= MIN_SIDE and b[3] - b[1] >= MIN_SIDE)


def _place(kind: str, anchor, new_is_subject: bool, rng) -> tuple:
    """Propose a box standing in ``kind`` relation to ``anchor``."""
    ax1, ay1, ax2, ay2 = anchor
    aw, ah = ax2 - ax1, ay2 - ay1
    if kind == "contains":
        if new_is_subject:
            m = rng.uniform(0.02, 0.15, size=4)
            return (max(0.0, ax1 - m[0]), max(0.0, ay1 - m[1]),
                    min(1.0, ax2 + m[2]), min(1.0, ay2 + m[3]))
        fw, fh = rng.uniform(0.3, 0.7, size=2)
        w, h = aw * fw, ah * fh
        x1 = ax1 + rng.uniform(0, aw - w)
        y1 = ay1 + rng.uniform(0, ah - h)
        return (x1, y1, x1 + w, y1 + h)
    w, h = rng.uniform(0.12, 0.3, size=2)
    if kind == "overlap":
        cx = (ax1 + ax2) / 2 + rng.choice([-1, 1]) * rng.uniform(0.3, 0.7) * (aw + w) / 2
        cy = (ay1 + ay2) / 2 + rng.uniform(-0.5, 0.5) * (ah + h) / 2
        return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
    if kind == "above":
        gap = rng.uniform(0.0, ABOVE_MAX_GAP * 0.9)
        cx = (ax1 + ax2) / 2 + rng.uniform(-0.4, 0.4) * min(aw, w)
        if new_is_subject:
            y2 = ay1 - gap
            return (cx - w / 2, y2 - h, cx + w / 2, y2)
        y1 = ay2 + gap
        return (cx - w / 2, y1, cx + w / 2, y1 + h)
    if kind == "near":
        gap = rng.uniform(0.0, NEAR_MAX_GAP * 0.9)
        cy = (ay1 + ay2) / 2 + rng.uniform(-0.3, 0.3) * min(ah, h)
        if rng.random() < 0.5:
            x1 = ax2 + gap
            return (x1, cy - h / 2, x1 + w, cy + h / 2)
        x2 = ax1 - gap
        return (x2 - w, cy - h / 2, x2, cy + h / 2)
    raise WorldError(f"unknown precondition {kind!r}")


def _feature(world: World, cls: int, rng) -> tuple[float, ...]:
    f = world.prototypes[cls] + rng.normal(0.0, world.spec.feature_noise, size=world.spec.d_o)
    return tuple(float(x) for x in f)


def sample_scene(world: World, n_objects: int, seed, split: str = "train",
                 max_tries: int = 60) -> SceneSample:
    """Grow a scene of up to ``n_objects`` objects; each added object brings
    exactly one ground-truth triplet with its anchor."""
    if n_objects < 2:
        raise WorldError("a scene needs at least two objects")
    rng = np.random.default_rng(seed)
    probs = world.predicate_probs
    classes = [int(rng.integers(world.spec.n_obj_classes))]
    boxes = [_random_box(rng)]
    triplets = []
    while len(classes) < n_objects:
        pred = int(rng.choice(len(probs), p=probs)) + 1
        entries = world.entries_for(pred)
        placed = False
        for _ in range(max_tries):
            cs, co, _, kind = entries[rng.integers(len(entries))]
            roles = [(a, True) for a, c in enumerate(classes) if c == co]
            roles += [(a, False) for a, c in enumerate(classes) if c == cs]
            if not roles:
                continue
            anchor, new_is_subject = roles[rng.integers(len(roles))]
            box = _place(kind, boxes[anchor], new_is_subject, rng)
            if not _valid(box):
                continue
            new_cls = cs if new_is_subject else co
            if _consistent(world, classes, boxes, new_cls, box, anchor, new_is_subject, pred):
                new_id = len(classes)
                classes.append(new_cls)
                boxes.append(box)
                s, o = (new_id, anchor) if new_is_subject else (anchor, new_id)
                triplets.append((s, o, pred))
                placed = True
                break
        if not placed:
            log.debug("scene growth stopped at %d objects", len(classes))
            break
    dets = tuple(
        Detection(id=i, feature=_feature(world, c, rng), box=tuple(float(v) for v in b), label=c)
        for i, (c, b) in enumerate(zip(classes, boxes))
    )
    return SceneSample(detections=dets, gt_triplets=tuple(triplets), split=split)


def _consistent(world, classes, boxes, new_cls, box, anchor, new_is_subject, pred) -> bool:
    for k, (c, b) in enumerate(zip(classes, boxes)):
        fwd = world.label(new_cls, c, box, b)
        bwd = world.label(c, new_cls, b, box)
        if k == anchor:
            want_fwd = pred if new_is_subject else 0
            want_bwd = 0 if new_is_subject else pred
            if fwd != want_fwd or bwd != want_bwd:
                return False
        elif fwd or bwd:
            return False
    return True


def scene_labels(world: World, scene: SceneSample) -> dict[tuple[int, int], int]:
    """Rulebook labeling of every ordered pair with a nonzero predicate."""
    out = {}
    for a in scene.detections:
        for b in scene.detections:
            if a.id != b.id:
                p = world.label(a.label, b.label, a.box, b.box)
                if p:
                    out[(a.id, b.id)] = p
    return out


def generate_split(world: World, n: int, seed: int, split: str) -> list[SceneSample]:
    code = {"train": 0, "val": 1, "test": 2}[split]
    lo, hi = world.spec.min_objects, world.spec.max_objects
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, code, i])
        n_obj = int(rng.integers(lo, hi + 1))
        out.append(sample_scene(world, n_obj, [seed, code, i, 1], split=split))
    return out


# -- detector simulation ---------------------------------------------------

@dataclass
class DetectorNoise:
    box_jitter: float = 0.0
    label_flip: float = 0.0
    miss_rate: float = 0.0

    def __post_init__(self):
        for name in ("label_flip", "miss_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise WorldError(f"{name} must lie in [0, 1], got {v}")
        if self.box_jitter < 0:
            raise WorldError("box_jitter must be >= 0")

    @property
    def is_zero(self) -> bool:
        return self.box_jitter == 0 and self.label_flip == 0 and self.miss_rate == 0


def _repair(box) -> tuple:
    x1, y1, x2, y2 = (min(max(v, 0.0), 1.0) for v in box)
    x1, x2 = sorted((x1, x2))
    y1, y2 = sorted((y1, y2))
    if x2 - x1 < MIN_SIDE:
        c = min(max((x1 + x2) / 2, MIN_SIDE / 2), 1 - MIN_SIDE / 2)
        x1, x2 = c - MIN_SIDE / 2, c + MIN_SIDE / 2
    if y2 - y1 < MIN_SIDE:
        c = min(max((y1 + y2) / 2, MIN_SIDE / 2), 1 - MIN_SIDE / 2)
        y1, y2 = c - MIN_SIDE / 2, c + MIN_SIDE / 2
    return (float(x1), float(y1), float(x2), float(y2))


def simulate_detector(scene: SceneSample, noise: DetectorNoise, seed,
                      world: World | None = None) -> list[Detection]:
    """Noisy detections of a scene's objects.

    Boxes get Gaussian jitter, labels flip to a uniformly chosen other class
    and objects are dropped independently.  When ``world`` is given, a
    flipped detection's feature is redrawn from the wrong class's prototype.
    """
    if noise.is_zero:
        return list(scene.detections)
    rng = np.random.default_rng(seed)
    n_cls = world.spec.n_obj_classes if world else 1 + max(d.label for d in scene.detections)
    out = []
    for d in scene.detections:
        u_miss, u_flip = rng.random(2)
        jitter = rng.normal(0.0, noise.box_jitter, size=4) if noise.box_jitter else np.zeros(4)
        alt = int(rng.integers(max(n_cls - 1, 1)))
        if u_miss < noise.miss_rate:
            continue
        label, feature = d.label, d.feature
        if u_flip < noise.label_flip and n_cls > 1:
            label = alt if alt < d.label else alt + 1
            if world is not None:
                feature = _feature(world, label, rng)
        box = _repair(np.asarray(d.box) + jitter)
        out.append(Detection(id=d.id, feature=feature, box=box, label=label))
    return out


# -- dataset files ---------------------------------------------------------

def write_dataset(samples: Iterable[SceneSample], path, spec: WorldSpec | dict | None = None) -> None:
    """JSON-lines file: a ``{"version", "spec"}`` header, then one scene per line."""
    spec_d = spec.to_dict() if isinstance(spec, WorldSpec) else (spec or {})
    with open(path, "w") as fh:
        fh.write(json.dumps({"version": DATASET_VERSION, "spec": spec_d}, sort_keys=True) + "\n")
        for s in samples:
            fh.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")


def read_dataset(path) -> tuple[dict, list[SceneSample]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise WorldError(f"{path}: empty file, missing header")
    try:
        header = json.loads(lines[0])
        if header.get("version") != DATASET_VERSION:
            raise WorldError(f"{path}: dataset version {header.get('version')!r}, "
                             f"expected {DATASET_VERSION}")
        samples = [SceneSample.from_dict(json.loads(line)) for line in lines[1:] if line.strip()]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise WorldError(f"{path}: malformed dataset ({exc})") from exc
    return header.get("spec", {}), samples
