"""Scene-graph metrics: triplet matching, R@K, mR@K, weighted mAP, the
weighted score, subtask evaluation and per-predicate long-tail tables."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .graph import Detection, build_edge_dual_graph, build_primitive_graph, union_box

SUBTASKS = ("predcls", "sgcls", "sggen")
DEFAULT_KS = (20, 50, 100)
STRATA = ("head", "body", "tail")


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class Triplet:
    subject_box: tuple
    object_box: tuple
    subject_label: int
    object_label: int
    predicate: int
    score: float = 1.0


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    for box in (a, b):
        if not (box[2] > box[0] and box[3] > box[1]):
            raise EvaluationError(f"degenerate box {tuple(box)}")
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def _overlap(p: Triplet, g: Triplet, box_mode: str) -> float:
    if box_mode == "pair":
        return min(iou(p.subject_box, g.subject_box), iou(p.object_box, g.object_box))
    if box_mode == "union":
        return iou(union_box(p.subject_box, p.object_box), union_box(g.subject_box, g.object_box))
    raise EvaluationError(f"unknown box mode {box_mode!r}")


def match_triplets(preds: Sequence[Triplet], gts: Sequence[Triplet],
                   iou_thresh: float = 0.5, box_mode: str = "pair") -> list[int]:
    """Greedy top-down matching.

    Returns, for each prediction, the index of the ground truth it claims or
    -1.  A prediction claims the unmatched ground truth with equal labels and
    predicate whose overlap is largest and at least ``iou_thresh`` (ties go
    to the lower index).  ``pair`` overlap is the smaller of the subject and
    object IoUs; ``union`` compares the union boxes.
    """
    scores = [p.score for p in preds]
    if any(a < b for a, b in zip(scores, scores[1:])):
        raise EvaluationError("predictions must be sorted by descending score")
    taken = [False] * len(gts)
    out = []
    for p in preds:
        best, best_ov = -1, -1.0
        for k, g in enumerate(gts):
            if taken[k] or (p.subject_label, p.object_label, p.predicate) != (
                    g.subject_label, g.object_label, g.predicate):
                continue
            ov = _overlap(p, g, box_mode)
            if ov >= iou_thresh and ov > best_ov:
                best, best_ov = k, ov
        if best >= 0:
            taken[best] = True
        out.append(best)
    return out


@dataclass
class ImageEval:
    """One image's ranked predictions, ground truth and both match vectors."""

    preds: list[Triplet]
    gts: list[Triplet]
    pair_match: list[int]
    union_match: list[int]

    @classmethod
    def build(cls, preds: Sequence[Triplet], gts: Sequence[Triplet],
              iou_thresh: float = 0.5) -> "ImageEval":
        preds, gts = list(preds), list(gts)
        return cls(preds, gts,
                   match_triplets(preds, gts, iou_thresh, "pair"),
                   match_triplets(preds, gts, iou_thresh, "union"))

    def matched_within(self, K: int) -> list[int]:
        return [m for m in self.pair_match[:K] if m >= 0]


def _check_k(K: int) -> None:
    if K <= 0:
        raise EvaluationError(f"K must be positive, got {K}")


def recall_at_k(images: Sequence[ImageEval], K: int) -> float:
    """Per-image fraction of ground truth recovered in the top K, averaged
    over images that have ground truth."""
    _check_k(K)
    vals = [len(im.matched_within(K)) / len(im.gts) for im in images if im.gts]
    return float(np.mean(vals)) if vals else 0.0


def per_predicate_recall(images: Sequence[ImageEval], K: int) -> dict[int, tuple[int, float]]:
    """``predicate -> (support, recall@K)`` pooled over the whole split."""
    _check_k(K)
    support: dict[int, int] = {}
    hits: dict[int, int] = {}
    for im in images:
        for g in im.gts:
            support[g.predicate] = support.get(g.predicate, 0) + 1
        for m in im.matched_within(K):
            p = im.gts[m].predicate
            hits[p] = hits.get(p, 0) + 1
    return {p: (n, hits.get(p, 0) / n) for p, n in sorted(support.items())}


def mean_recall_at_k(images: Sequence[ImageEval], K: int) -> float:
    """Unweighted mean of per-predicate recall over predicates with ground truth."""
    table = per_predicate_recall(images, K)
    table.pop(0, None)
    if not table:
        raise EvaluationError("empty ground truth")
    return float(np.mean([r for _, r in table.values()]))


def average_precision(tp: Sequence[bool], n_gt: int) -> float:
    """All-point interpolated AP of a ranked TP/FP list against ``n_gt`` positives."""
    if n_gt == 0:
        raise EvaluationError("AP needs at least one positive")
    if len(tp) == 0:
        return 0.0
    tp_arr = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp_arr)
    precision = ctp / np.arange(1, len(tp_arr) + 1)
    recall = ctp / n_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * envelope))


def per_predicate_ap(images: Sequence[ImageEval], box_mode: str = "pair") -> dict[int, tuple[int, float]]:
    """``predicate -> (support, AP)`` with predictions ranked across the split."""
    support: dict[int, int] = {}
    for im in images:
        for g in im.gts:
            support[g.predicate] = support.get(g.predicate, 0) + 1
    ranked: dict[int, list[tuple[float, int, int, bool]]] = {}
    for i, im in enumerate(images):
        match = im.pair_match if box_mode == "pair" else im.union_match
        for r, (p, m) in enumerate(zip(im.preds, match)):
            ranked.setdefault(p.predicate, []).append((-p.score, i, r, m >= 0))
    out = {}
    for p, n in sorted(support.items()):
        rows = sorted(ranked.get(p, []))
        out[p] = (n, average_precision([row[3] for row in rows], n))
    return out


def wmap(images: Sequence[ImageEval], box_mode: str = "pair") -> float:
    """Per-predicate AP weighted by ground-truth support.  ``pair`` gives the
    relationship variant, ``union`` the phrase variant."""
    if box_mode not in ("pair", "union"):
        raise EvaluationError(f"unknown box mode {box_mode!r}")
    table = per_predicate_ap(images, box_mode)
    total = sum(n for n, _ in table.values())
    if total == 0:
        raise EvaluationError("empty ground truth")
    return float(sum(n * ap for n, ap in table.values()) / total)


def score_wtd(r50: float, wmap_rel: float, wmap_phr: float) -> float:
    return 0.2 * r50 + 0.4 * wmap_rel + 0.4 * wmap_phr


# -- reports ---------------------------------------------------------------

def strata_from_counts(counts: dict[int, int], head: float = 0.3, tail: float = 0.3) -> dict[int, str]:
    """Rank predicates by frequency (ties by id) and cut 30% / 40% / 30%."""
    order = sorted(counts, key=lambda p: (-counts[p], p))
    n = len(order)
    n_head = int(math.floor(head * n + 0.5))
    n_tail = int(math.floor(tail * n + 0.5))
    out = {}
    for rank, p in enumerate(order):
        if rank < n_head:
            out[p] = "head"
        elif rank >= n - n_tail:
            out[p] = "tail"
        else:
            out[p] = "body"
    return out


@dataclass
class MetricsReport:
    recall_at: dict[int, float]
    mean_recall_at: dict[int, float]
    wmap_rel: float
    wmap_phr: float
    score_wtd: float
    per_predicate_recall: dict[int, tuple[int, float]]
    strata: dict[str, float] = field(default_factory=dict)
    subtask: str = ""
    n_images: int = 0

    def to_dict(self) -> dict:
        return {
            "subtask": self.subtask,
            "n_images": self.n_images,
            "recall_at": {str(k): v for k, v in self.recall_at.items()},
            "mean_recall_at": {str(k): v for k, v in self.mean_recall_at.items()},
            "wmap_rel": self.wmap_rel,
            "wmap_phr": self.wmap_phr,
            "score_wtd": self.score_wtd,
            "per_predicate_recall": {
                str(p): {"support": n, "recall": r} for p, (n, r) in self.per_predicate_recall.items()
            },
            "strata": dict(self.strata),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            recall_at={int(k): v for k, v in d["recall_at"].items()},
            mean_recall_at={int(k): v for k, v in d["mean_recall_at"].items()},
            wmap_rel=d["wmap_rel"], wmap_phr=d["wmap_phr"], score_wtd=d["score_wtd"],
            per_predicate_recall={
                int(p): (v["support"], v["recall"]) for p, v in d["per_predicate_recall"].items()
            },
            strata=d.get("strata", {}), subtask=d.get("subtask", ""), n_images=d.get("n_images", 0),
        )


def stratum_recalls(per_pred: dict[int, tuple[int, float]], strata: dict[int, str]) -> dict[str, float]:
    out = {}
    for name in STRATA:
        vals = [r for p, (_, r) in per_pred.items() if strata.get(p) == name]
        if vals:
            out[name] = float(np.mean(vals))
    return out


def build_report(images: Sequence[ImageEval], Ks: Sequence[int] = DEFAULT_KS,
                 strata: dict[int, str] | None = None, longtail_k: int = 50,
                 subtask: str = "") -> MetricsReport:
    if sum(len(im.gts) for im in images) == 0:
        raise EvaluationError("empty ground truth")
    recall = {K: recall_at_k(images, K) for K in Ks}
    mrecall = {K: mean_recall_at_k(images, K) for K in Ks}
    r50 = recall[50] if 50 in recall else recall_at_k(images, 50)
    w_rel, w_phr = wmap(images, "pair"), wmap(images, "union")
    per_pred = per_predicate_recall(images, longtail_k)
    return MetricsReport(
        recall_at=recall, mean_recall_at=mrecall, wmap_rel=w_rel, wmap_phr=w_phr,
        score_wtd=score_wtd(r50, w_rel, w_phr), per_predicate_recall=per_pred,
        strata=stratum_recalls(per_pred, strata) if strata else {},
        subtask=subtask, n_images=len(images),
    )


def longtail_report(report: MetricsReport, strata: dict[int, str]) -> list[dict]:
    """Rows ``rank, predicate, support, recall, stratum`` ranked by support."""
    items = sorted(report.per_predicate_recall.items(), key=lambda kv: (-kv[1][0], kv[0]))
    return [
        {"rank": r + 1, "predicate": p, "support": n, "recall": rec,
         "stratum": strata.get(p, "unranked")}
        for r, (p, (n, rec)) in enumerate(items)
    ]


def longtail_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["rank", "predicate", "support", "recall", "stratum"],
                       lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


# -- model-driven evaluation ----------------------------------------------

def extract_triplets(detections: Sequence[Detection], directed_edges: Sequence[tuple[int, int]],
                     u_hat: np.ndarray, p_hat: np.ndarray | None, use_gt_labels: bool,
                     graph_constraint: bool = True) -> list[Triplet]:
    """Rank triplets by subject x predicate x object confidence.

    With ``graph_constraint`` only the best non-background predicate of each
    ordered pair is emitted.
    """
    if p_hat is None or len(directed_edges) == 0:
        return []
    pos = {d.id: i for i, d in enumerate(detections)}
    if use_gt_labels:
        labels = [d.label for d in detections]
        conf = [1.0] * len(detections)
    else:
        labels = [int(i) for i in u_hat.argmax(axis=1)]
        conf = [float(x) for x in u_hat.max(axis=1)]
    out = []
    for k, (s, o) in enumerate(directed_edges):
        i, j = pos[s], pos[o]
        row = p_hat[k]
        preds = [int(np.argmax(row[1:])) + 1] if graph_constraint else range(1, len(row))
        for p in preds:
            out.append(Triplet(detections[i].box, detections[j].box, labels[i], labels[j], p,
                               conf[i] * float(row[p]) * conf[j]))
    order = sorted(range(len(out)), key=lambda n: -out[n].score)
    return [out[n] for n in order]


def gt_triplets(scene) -> list[Triplet]:
    by_id = {d.id: d for d in scene.detections}
    return [Triplet(by_id[s].box, by_id[o].box, by_id[s].label, by_id[o].label, p)
            for s, o, p in scene.gt_triplets]


def subtask_inputs(scene, subtask: str, noise=None, seed=0, world=None) -> list[Detection]:
    from .synthetic import DetectorNoise, simulate_detector

    if subtask not in SUBTASKS:
        raise EvaluationError(f"unknown subtask {subtask!r}")
    if subtask == "predcls":
        if any(d.label < 0 for d in scene.detections):
            raise EvaluationError("predcls needs ground-truth labels")
        return list(scene.detections)
    if subtask == "sgcls":
        return list(scene.detections)
    return simulate_detector(scene, noise or DetectorNoise(), seed, world)


def evaluate_subtask(config, params, scenes, subtask: str, noise=None, world=None,
                     seed: int = 0, Ks: Sequence[int] = DEFAULT_KS,
                     strata: dict[int, str] | None = None,
                     graph_constraint: bool = True) -> MetricsReport:
    """Run the model over ``scenes`` under ``subtask``'s inputs and score it."""
    from .model import build_index, forward

    images = []
    with ad.no_grad():
        for n, scene in enumerate(scenes):
            dets = subtask_inputs(scene, subtask, noise, [seed, n], world)
            preds: list[Triplet] = []
            if dets:
                g = build_primitive_graph(dets)
                dg = build_edge_dual_graph(g) if g.edges else None
                state = forward(build_index([(g, dg)]), config, params)
                p_hat = None if state.p_hat is None else state.p_hat.data
                preds = extract_triplets(g.nodes, g.directed_edges(), state.u_hat.data, p_hat,
                                         use_gt_labels=(subtask == "predcls"),
                                         graph_constraint=graph_constraint)
            images.append(ImageEval.build(preds, gt_triplets(scene)))
    return build_report(images, Ks, strata, subtask=subtask)
