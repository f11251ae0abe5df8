"""Independent reference implementations used as test oracles.

Plain Python loops only; nothing here imports the package's algorithms.
"""
from __future__ import annotations

import itertools
import math
from fractions import Fraction


def enumerate_dual_pairs(edges):
    """All unordered pairs of edges whose endpoint sets meet in exactly one node."""
    out = []
    for i, j in itertools.combinations(range(len(edges)), 2):
        common = set(edges[i]) & set(edges[j])
        if len(common) == 1:
            out.append((i, j, common.pop()))
    return out


def complete_edges(n):
    return [(a, b) for a in range(n) for b in range(a + 1, n)]


def box_iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def _union(a, b):
    return (min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3]))


def _overlap(p, g, mode):
    if mode == "pair":
        return min(box_iou(p.subject_box, g.subject_box), box_iou(p.object_box, g.object_box))
    return box_iou(_union(p.subject_box, p.object_box), _union(g.subject_box, g.object_box))


def greedy_matches(preds, gts, limit, mode, thresh=0.5):
    """Run greedy matching over the first ``limit`` predictions from scratch.

    Returns a list (one per considered prediction) of matched GT index or -1.
    """
    claimed = set()
    out = []
    for p in preds[:limit]:
        best, best_ov = -1, -1.0
        for k, g in enumerate(gts):
            if k in claimed:
                continue
            if p.subject_label != g.subject_label or p.object_label != g.object_label:
                continue
            if p.predicate != g.predicate:
                continue
            ov = _overlap(p, g, mode)
            if ov >= thresh and ov > best_ov:
                best, best_ov = k, ov
        if best >= 0:
            claimed.add(best)
        out.append(best)
    return out


def recall_oracle(images, K):
    """images: list of (preds, gts).  Exact fractions, averaged over images with GT."""
    vals = []
    for preds, gts in images:
        if not gts:
            continue
        hit = {m for m in greedy_matches(preds, gts, K, "pair") if m >= 0}
        vals.append(Fraction(len(hit), len(gts)))
    return sum(vals, Fraction(0)) / len(vals) if vals else Fraction(0)


def mean_recall_oracle(images, K):
    support, hits = {}, {}
    for preds, gts in images:
        for g in gts:
            support[g.predicate] = support.get(g.predicate, 0) + 1
        for m in greedy_matches(preds, gts, K, "pair"):
            if m >= 0:
                p = gts[m].predicate
                hits[p] = hits.get(p, 0) + 1
    support.pop(0, None)
    per = [Fraction(hits.get(p, 0), n) for p, n in support.items()]
    return sum(per, Fraction(0)) / len(per)


def ap_oracle(flags, n_gt):
    """AP as the mean, over positives, of the best precision reachable at or
    after that positive's rank."""
    total = Fraction(0)
    for k, f in enumerate(flags):
        if not f:
            continue
        best = Fraction(0)
        for j in range(k, len(flags)):
            prec = Fraction(sum(flags[: j + 1]), j + 1)
            best = max(best, prec)
        total += best
    return total / n_gt


def wmap_oracle(images, mode):
    support = {}
    rows = {}
    for i, (preds, gts) in enumerate(images):
        for g in gts:
            support[g.predicate] = support.get(g.predicate, 0) + 1
        match = greedy_matches(preds, gts, len(preds), mode)
        for r, (p, m) in enumerate(zip(preds, match)):
            rows.setdefault(p.predicate, []).append((-p.score, i, r, m >= 0))
    total_gt = sum(support.values())
    acc = Fraction(0)
    for c, n in support.items():
        flags = [row[3] for row in sorted(rows.get(c, []))]
        acc += n * ap_oracle(flags, n)
    return acc / total_gt


def scalar_relation_step(incidences, z, w_att, w_i, w_j):
    """One relation-centric layer with d_r = 1 and scalar weights.

    ``incidences``: list of (i, j); ``z``: dict (i, j) -> float.
    """
    new = {}
    for (i, j) in incidences:
        total = 0.0
        for (a, k) in incidences:
            if a != i:
                continue
            s_ik, s_ki = w_att * z[(i, k)], w_att * z[(k, i)]
            alpha_ik = math.exp(s_ik) / (math.exp(s_ik) + math.exp(s_ki))
            alpha_ki = math.exp(s_ki) / (math.exp(s_ik) + math.exp(s_ki))
            total += alpha_ik * z[(i, k)] * w_i + alpha_ki * z[(k, i)] * w_j
        new[(i, j)] = z[(i, j)] + max(0.0, total)
    return new
