"""Scene-graph data model, candidate graph construction and the edge dual transform.

A primitive graph holds detections as nodes and unordered object pairs as
edges.  Each edge carries two directional geometric descriptors, one for
``u -> v`` and one for ``v -> u``.  The edge dual graph turns every primitive
edge into a node and links two of them whenever they share an object.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

GEOMETRY_DIM = 16


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    id: int
    feature: tuple[float, ...]
    box: tuple[float, float, float, float]
    label: int = -1
    label_scores: tuple[float, ...] | None = None

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (0.0 <= x1 < x2 <= 1.0 and 0.0 <= y1 < y2 <= 1.0):
            raise GraphError(f"invalid box for detection {self.id}: {self.box}")
        if self.label_scores is not None and len(self.label_scores) > 0:
            best = int(np.argmax(self.label_scores))
            if self.label != best:
                raise GraphError(
                    f"label {self.label} disagrees with argmax of label_scores ({best})"
                )

    def to_dict(self) -> dict:
        d = {"id": self.id, "box": list(self.box), "label": self.label,
             "feature": list(self.feature)}
        if self.label_scores is not None:
            d["label_scores"] = list(self.label_scores)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Detection":
        scores = d.get("label_scores")
        return cls(
            id=int(d["id"]),
            feature=tuple(float(x) for x in d.get("feature", ())),
            box=tuple(float(x) for x in d["box"]),
            label=int(d.get("label", -1)),
            label_scores=None if scores is None else tuple(float(x) for x in scores),
        )


def union_box(a: Sequence[float], b: Sequence[float]) -> tuple[float, float, float, float]:
    return (min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3]))


def geometry_descriptor(subj: Sequence[float], obj: Sequence[float]) -> np.ndarray:
    """16-d subject->object descriptor: both boxes, their union, center
    offset and log size ratios."""
    sw, sh = subj[2] - subj[0], subj[3] - subj[1]
    ow, oh = obj[2] - obj[0], obj[3] - obj[1]
    dx = (obj[0] + obj[2]) / 2 - (subj[0] + subj[2]) / 2
    dy = (obj[1] + obj[3]) / 2 - (subj[1] + subj[3]) / 2
    return np.array(
        [*subj, *obj, *union_box(subj, obj), dx, dy, math.log(sw / ow), math.log(sh / oh)],
        dtype=np.float64,
    )


@dataclass(frozen=True)
class PrimitiveGraph:
    """Candidate relation graph.

    ``edges[k] = (a, b)`` with ``a < b`` (detection ids).  ``relation_features``
    has shape ``(len(edges), 2, 16)``: slot 0 describes ``a -> b`` and slot 1
    describes ``b -> a``.
    """

    nodes: tuple[Detection, ...]
    edges: tuple[tuple[int, int], ...]
    relation_features: np.ndarray = field(repr=False, compare=False)

    @property
    def node_ids(self) -> list[int]:
        return [d.id for d in self.nodes]

    def node_index(self) -> dict[int, int]:
        return {d.id: i for i, d in enumerate(self.nodes)}

    def directed_edges(self) -> list[tuple[int, int]]:
        """Directional edges in tensor order: 2k is ``a -> b``, 2k+1 is ``b -> a``."""
        out = []
        for a, b in self.edges:
            out.append((a, b))
            out.append((b, a))
        return out

    def to_dict(self) -> dict:
        return {
            "nodes": [{"id": d.id, "box": list(d.box), "label": d.label} for d in self.nodes],
            "edges": [{"u": a, "v": b} for a, b in self.edges],
        }


def build_primitive_graph(
    detections: Sequence[Detection],
    mode: str = "complete",
    pairs: Iterable[tuple[int, int]] | None = None,
) -> PrimitiveGraph:
    """Build the candidate graph over ``detections``.

    ``mode="complete"`` links every unordered pair; ``mode="pairs"`` uses the
    given ``pairs`` of detection ids.  Nodes are ordered by id and edges
    lexicographically by ``(min_id, max_id)``.
    """
    if len(detections) == 0:
        raise GraphError("empty scene")
    dims = {len(d.feature) for d in detections}
    if len(dims) != 1:
        raise GraphError("dimension mismatch")
    nodes = tuple(sorted(detections, key=lambda d: d.id))
    ids = [d.id for d in nodes]
    if len(set(ids)) != len(ids):
        raise GraphError("duplicate detection id")

    if mode == "complete":
        edges = list(itertools.combinations(ids, 2))
    elif mode == "pairs":
        if pairs is None:
            raise GraphError("pairs mode needs a pair list")
        known = set(ids)
        seen = set()
        for u, v in pairs:
            if u == v:
                raise GraphError(f"self-loop on node {u}")
            if u not in known or v not in known:
                raise GraphError(f"edge ({u}, {v}) references an unknown node")
            key = (min(u, v), max(u, v))
            if key in seen:
                raise GraphError(f"duplicate pair {key}")
            seen.add(key)
        edges = sorted(seen)
    else:
        raise GraphError(f"unknown mode {mode!r}")

    boxes = {d.id: d.box for d in nodes}
    feats = np.zeros((len(edges), 2, GEOMETRY_DIM))
    for k, (a, b) in enumerate(edges):
        feats[k, 0] = geometry_descriptor(boxes[a], boxes[b])
        feats[k, 1] = geometry_descriptor(boxes[b], boxes[a])
    feats.flags.writeable = False
    return PrimitiveGraph(nodes=nodes, edges=tuple(edges), relation_features=feats)


@dataclass(frozen=True)
class EdgeDualGraph:
    """Edge dual of a primitive graph.

    Dual nodes are primitive edge indices.  ``dual_edges`` holds each adjacent
    pair once as ``(i, j, shared_node_id)`` with ``i < j``; the directional
    incidences ``(i, j)`` and ``(j, i)`` are exposed by :meth:`incidences`.
    """

    dual_nodes: tuple[int, ...]
    dual_edges: tuple[tuple[int, int, int], ...]
    primal_edges: tuple[tuple[int, int], ...] = field(repr=False)

    def incidences(self) -> list[tuple[int, int, int]]:
        """Ordered incidences ``(i, j, shared)``, sorted by ``(i, j)``."""
        out = []
        for i, j, s in self.dual_edges:
            out.append((i, j, s))
            out.append((j, i, s))
        out.sort()
        return out

    @property
    def incidence_count(self) -> int:
        return 2 * len(self.dual_edges)

    def to_dict(self) -> dict:
        return {
            "dual_nodes": list(self.dual_nodes),
            "dual_edges": [{"i": i, "j": j, "shared": s} for i, j, s in self.dual_edges],
        }


def build_edge_dual_graph(g: PrimitiveGraph) -> EdgeDualGraph:
    if len(g.edges) == 0:
        raise GraphError("no relations to dualize")
    incident: dict[int, list[int]] = {}
    for k, (a, b) in enumerate(g.edges):
        incident.setdefault(a, []).append(k)
        incident.setdefault(b, []).append(k)
    dual = []
    for node, ks in incident.items():
        for i, j in itertools.combinations(ks, 2):
            dual.append((i, j, node))
    dual.sort()
    for (i, j, _), (i2, j2, _) in zip(dual, dual[1:]):
        if (i, j) == (i2, j2):
            raise GraphError(f"edges {i} and {j} share more than one node")
    return EdgeDualGraph(
        dual_nodes=tuple(range(len(g.edges))),
        dual_edges=tuple(dual),
        primal_edges=g.edges,
    )


def dual_neighborhood(dg: EdgeDualGraph, edge_id: int) -> list[tuple[int, int]]:
    """Neighbors of a dual node as ``(neighbor_edge_id, shared_node_id)``."""
    if edge_id not in range(len(dg.dual_nodes)):
        raise GraphError(f"unknown edge id {edge_id}")
    out = []
    for i, j, s in dg.dual_edges:
        if i == edge_id:
            out.append((j, s))
        elif j == edge_id:
            out.append((i, s))
    return sorted(out)


def validate_dual_counts(n_nodes: int) -> tuple[int, int]:
    """Closed-form (dual node count, dual edge count) for a complete graph on
    ``n_nodes`` nodes: ``|E| = n(n-1)/2`` and ``|E| (n - 2)``."""
    if n_nodes < 2:
        raise GraphError("need at least two nodes")
    n_edges = n_nodes * (n_nodes - 1) // 2
    return n_edges, n_edges * (n_nodes - 2)


def scene_from_json(doc: dict) -> PrimitiveGraph:
    """Parse the scene JSON format; a missing ``edges`` key means complete mode."""
    dets = [Detection.from_dict(n) for n in doc["nodes"]]
    if "edges" in doc:
        return build_primitive_graph(dets, "pairs", [(e["u"], e["v"]) for e in doc["edges"]])
    return build_primitive_graph(dets, "complete")


def dumps_dual(dg: EdgeDualGraph) -> str:
    return json.dumps(dg.to_dict(), sort_keys=True)
