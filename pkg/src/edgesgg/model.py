"""DualMPNN: object-centric and relation-centric message passing, feature
aggregation, classifier heads and the joint loss.

All per-edge and per-incidence computations are vectorized over a
:class:`GraphIndex`, which may hold several scenes as one disjoint graph.
Every layer reads only the previous layer's tensors, so updates are
simultaneous across edges.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .graph import GEOMETRY_DIM, EdgeDualGraph, PrimitiveGraph, build_edge_dual_graph

AGGREGATIONS = ("concat", "mean", "multiply")


class ConfigError(ValueError):
    pass


@dataclass
class DualMPNNConfig:
    d_o: int = 64
    d_r: int = 64
    H: int = 2
    n_obj_classes: int = 5
    n_rel_classes: int = 6
    aggregation: str = "concat"
    enable_object_branch: bool = True
    enable_relation_branch: bool = True

    def __post_init__(self):
        if min(self.d_o, self.d_r, self.H) < 1:
            raise ConfigError("d_o, d_r and H must be >= 1")
        if self.n_obj_classes < 1 or self.n_rel_classes < 2:
            raise ConfigError("need >= 1 object class and >= 2 relation classes")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")
        if not (self.enable_object_branch or self.enable_relation_branch):
            raise ConfigError("at least one branch must be enabled")

    @property
    def both_branches(self) -> bool:
        return self.enable_object_branch and self.enable_relation_branch

    @property
    def fc_in(self) -> int:
        if self.both_branches and self.aggregation == "concat":
            return 2 * self.d_r
        return self.d_r

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DualMPNNConfig":
        return cls(**d)


def init_params(config: DualMPNNConfig, seed: int) -> ParamStore:
    """Create exactly the parameters the configured branches use.

    Layer weights are shared across the ``H`` message-passing layers.
    """
    p = ParamStore(seed)
    d_o, d_r = config.d_o, config.d_r
    if config.enable_object_branch:
        p.create("geo_W", (GEOMETRY_DIM, d_r))
        p.create("geo_b", (1, d_r), fan_in=GEOMETRY_DIM)
        p.create("W_u", (d_r, d_r))
        p.create("W_v", (d_r, d_r))
        p.create("w_att", (d_o, 1))
    if config.enable_relation_branch:
        p.create("W_o2e", (d_o, d_r))
        p.create("W_i", (d_r, d_r))
        p.create("W_j", (d_r, d_r))
        p.create("w_att_rel", (d_r, 1))
    p.create("fc_W", (config.fc_in, d_r))
    p.create("fc_b", (1, d_r), fan_in=config.fc_in)
    p.create("W_obj", (d_o, config.n_obj_classes))
    p.create("W_rel", (d_r, config.n_rel_classes))
    return p


BRANCH_PARAMS = {
    "object": {"geo_W", "geo_b", "W_u", "W_v", "w_att"},
    "relation": {"W_o2e", "W_i", "W_j", "w_att_rel"},
    "shared": {"fc_W", "fc_b", "W_obj", "W_rel"},
}


def attention_score(u_feat, v_feat, w_att) -> float:
    """``exp(w.u) / (exp(w.u) + exp(w.v))`` with max-subtraction."""
    u = np.asarray(u_feat, dtype=np.float64).ravel()
    v = np.asarray(v_feat, dtype=np.float64).ravel()
    w = np.asarray(w_att, dtype=np.float64).ravel()
    if not (u.shape == v.shape == w.shape):
        raise ValueError(f"length mismatch: {u.shape}, {v.shape}, {w.shape}")
    a, b = float(w @ u), float(w @ v)
    m = max(a, b)
    ea, eb = math.exp(a - m), math.exp(b - m)
    return ea / (ea + eb)


@dataclass
class GraphIndex:
    """Flat index arrays for one or more scenes laid out as a disjoint graph.

    Directional edge ``2k`` is ``a -> b`` and ``2k + 1`` is ``b -> a`` for the
    ``k``-th unordered edge; ``dir_rev`` swaps them.  Incidence ``m`` is the
    ordered dual pair ``(inc_i[m], inc_j[m])`` through node ``inc_shared[m]``,
    and ``inc_rev[m]`` is the position of ``(inc_j[m], inc_i[m])``.
    """

    node_feat: np.ndarray
    geom: np.ndarray
    dir_src: np.ndarray
    dir_dst: np.ndarray
    dir_rev: np.ndarray
    dir_edge: np.ndarray
    n_edges: int
    inc_i: np.ndarray
    inc_j: np.ndarray
    inc_shared: np.ndarray
    inc_rev: np.ndarray
    node_offsets: list[int] = field(default_factory=list)
    dir_offsets: list[int] = field(default_factory=list)

    @property
    def n_nodes(self) -> int:
        return self.node_feat.shape[0]

    @property
    def n_dir(self) -> int:
        return self.dir_src.shape[0]

    @property
    def n_incidences(self) -> int:
        return self.inc_i.shape[0]

    @property
    def n_scenes(self) -> int:
        return len(self.node_offsets) - 1


def scene_index(g: PrimitiveGraph, dg: EdgeDualGraph | None = None) -> GraphIndex:
    """Index arrays for a single scene; the dual graph is built if omitted."""
    pos = g.node_index()
    E = len(g.edges)
    feat = np.array([d.feature for d in g.nodes], dtype=np.float64).reshape(len(g.nodes), -1)
    src, dst = [], []
    for a, b in g.edges:
        src += [pos[a], pos[b]]
        dst += [pos[b], pos[a]]
    dir_ids = np.arange(2 * E, dtype=np.int64)
    inc_i, inc_j, inc_s, inc_rev = [], [], [], []
    if E and dg is None:
        dg = build_edge_dual_graph(g)
    if dg is not None:
        incs = dg.incidences()
        where = {(i, j): m for m, (i, j, _) in enumerate(incs)}
        for i, j, s in incs:
            inc_i.append(i)
            inc_j.append(j)
            inc_s.append(pos[s])
            inc_rev.append(where[(j, i)])

    def ints(x):
        return np.asarray(x, dtype=np.int64)

    return GraphIndex(
        node_feat=feat,
        geom=g.relation_features.reshape(2 * E, GEOMETRY_DIM),
        dir_src=ints(src), dir_dst=ints(dst), dir_rev=dir_ids ^ 1, dir_edge=dir_ids // 2,
        n_edges=E,
        inc_i=ints(inc_i), inc_j=ints(inc_j), inc_shared=ints(inc_s), inc_rev=ints(inc_rev),
        node_offsets=[0, len(g.nodes)], dir_offsets=[0, 2 * E],
    )


def merge_indices(parts: Sequence[GraphIndex]) -> GraphIndex:
    """Lay several scene indices out as one disjoint graph."""
    if len(parts) == 1:
        return parts[0]
    n_nodes = np.cumsum([0] + [p.n_nodes for p in parts])
    n_dir = np.cumsum([0] + [p.n_dir for p in parts])
    n_edges = np.cumsum([0] + [p.n_edges for p in parts])
    n_inc = np.cumsum([0] + [p.n_incidences for p in parts])

    def cat(attr, offsets):
        return np.concatenate([getattr(p, attr) + off for p, off in zip(parts, offsets)])

    node_off, dir_off = [0], [0]
    for p in parts:
        node_off.append(node_off[-1] + p.n_nodes)
        dir_off.append(dir_off[-1] + p.n_dir)
    return GraphIndex(
        node_feat=np.concatenate([p.node_feat for p in parts]),
        geom=np.concatenate([p.geom for p in parts]),
        dir_src=cat("dir_src", n_nodes), dir_dst=cat("dir_dst", n_nodes),
        dir_rev=cat("dir_rev", n_dir), dir_edge=cat("dir_edge", n_edges),
        n_edges=int(n_edges[-1]),
        inc_i=cat("inc_i", n_edges), inc_j=cat("inc_j", n_edges),
        inc_shared=cat("inc_shared", n_nodes), inc_rev=cat("inc_rev", n_inc),
        node_offsets=node_off, dir_offsets=dir_off,
    )


def build_index(scenes: Sequence[tuple[PrimitiveGraph, EdgeDualGraph | None]]) -> GraphIndex:
    return merge_indices([scene_index(g, dg) for g, dg in scenes])


def object_attention(index: GraphIndex, node_feat: Tensor, w_att: Tensor) -> Tensor:
    """alpha(u, v) per directional edge, shape ``(2E, 1)``."""
    s = node_feat @ w_att
    return ad.sigmoid(ad.gather_rows(s, index.dir_src) - ad.gather_rows(s, index.dir_dst))


def object_centric_update(index: GraphIndex, e_h: Tensor, alpha: Tensor,
                          W_u: Tensor, W_v: Tensor) -> Tensor:
    if e_h.shape[0] != index.n_dir:
        raise ValueError(f"expected {index.n_dir} directional edge rows, got {e_h.shape[0]}")
    e_rev = ad.gather_rows(e_h, index.dir_rev)
    msg = alpha * (e_h @ W_u) + (1.0 - alpha) * (e_rev @ W_v)
    return e_h + ad.relu(msg)


def relation_init(index: GraphIndex, node_feat: Tensor, W_o2e: Tensor) -> Tensor:
    """z0 of each incidence is its shared object's feature mapped to d_r."""
    if index.n_incidences and index.inc_shared.max() >= node_feat.shape[0]:
        raise ValueError("incidence references a missing shared node")
    return ad.gather_rows(node_feat @ W_o2e, index.inc_shared)


def relation_centric_update(index: GraphIndex, z_h: Tensor, w_att_rel: Tensor,
                            W_i: Tensor, W_j: Tensor) -> Tensor:
    """One relation-centric layer.

    For incidence ``(e_i, e_j)`` the update adds
    ``relu(sum_k a(i,k) z<i,k> W_i + a(k,i) z<k,i> W_j)`` with ``k`` ranging
    over the dual neighbors of ``e_i``; ``a`` compares the two incidence
    directions' scores so ``a(i,k) + a(k,i) = 1``.
    """
    if z_h.shape[0] != index.n_incidences:
        raise ValueError(f"expected {index.n_incidences} incidence rows, got {z_h.shape[0]}")
    t = z_h @ w_att_rel
    a = ad.sigmoid(t - ad.gather_rows(t, index.inc_rev))
    z_rev = ad.gather_rows(z_h, index.inc_rev)
    term = a * (z_h @ W_i) + (1.0 - a) * (z_rev @ W_j)
    per_edge = ad.scatter_add_rows(term, index.inc_i, index.n_edges)
    return z_h + ad.relu(ad.gather_rows(per_edge, index.inc_i))


def pool_dual_to_edge(index: GraphIndex, z_H: Tensor) -> Tensor:
    """Mean of ``z<e_i, .>`` onto each directional edge of ``e_i`` (zero if
    ``e_i`` has no dual neighbors)."""
    counts = np.bincount(index.inc_i, minlength=index.n_edges).astype(np.float64)
    inv = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
    pooled = ad.scatter_add_rows(z_H, index.inc_i, index.n_edges) * Tensor(inv.reshape(-1, 1))
    return ad.gather_rows(pooled, index.dir_edge)


def aggregate_features(e_H: Tensor | None, z_bar: Tensor | None, mode: str,
                       fc_W: Tensor, fc_b: Tensor) -> Tensor:
    if mode not in AGGREGATIONS:
        raise ConfigError(f"unknown aggregation {mode!r}")
    if e_H is None:
        x = z_bar
    elif z_bar is None:
        x = e_H
    elif mode == "concat":
        x = ad.concat_cols(e_H, z_bar)
    elif mode == "mean":
        x = (e_H + z_bar) * 0.5
    else:
        x = e_H * z_bar
    return ad.relu(x @ fc_W + fc_b)


def predict(u_feat: Tensor, p_r: Tensor | None, W_obj: Tensor, W_rel: Tensor):
    u_hat = ad.softmax_row(u_feat @ W_obj)
    p_hat = None if p_r is None else ad.softmax_row(p_r @ W_rel)
    return u_hat, p_hat


def joint_loss(u_hat: Tensor, p_hat: Tensor | None, obj_targets, rel_targets,
               obj_weights=None, rel_weights=None):
    """Returns ``(L_obj, L_rel, L)``; ``L_rel`` is a zero constant when there
    are no relations."""
    l_obj = ad.cross_entropy(u_hat, obj_targets, obj_weights)
    if p_hat is None or p_hat.shape[0] == 0:
        l_rel = Tensor(0.0)
    else:
        l_rel = ad.cross_entropy(p_hat, rel_targets, rel_weights)
    return l_obj, l_rel, l_obj + l_rel


@dataclass
class ForwardState:
    e: list[Tensor]
    z: list[Tensor]
    z_bar: Tensor | None
    p_r: Tensor | None
    u_hat: Tensor
    p_hat: Tensor | None


def forward(index: GraphIndex, config: DualMPNNConfig, params: ParamStore) -> ForwardState:
    if not (config.enable_object_branch or config.enable_relation_branch):
        raise ConfigError("at least one branch must be enabled")
    X = Tensor(index.node_feat)
    if X.shape[1] != config.d_o:
        raise ConfigError(f"node features have width {X.shape[1]}, config says d_o={config.d_o}")
    es: list[Tensor] = []
    zs: list[Tensor] = []
    e_H = z_bar = p_r = p_hat = None
    if index.n_dir:
        if config.enable_object_branch:
            e = Tensor(index.geom) @ params["geo_W"] + params["geo_b"]
            alpha = object_attention(index, X, params["w_att"])
            es.append(e)
            for _ in range(config.H):
                e = object_centric_update(index, e, alpha, params["W_u"], params["W_v"])
                es.append(e)
            e_H = e
        if config.enable_relation_branch:
            z = relation_init(index, X, params["W_o2e"])
            zs.append(z)
            for _ in range(config.H):
                z = relation_centric_update(index, z, params["w_att_rel"], params["W_i"], params["W_j"])
                zs.append(z)
            z_bar = pool_dual_to_edge(index, z)
        p_r = aggregate_features(e_H, z_bar, config.aggregation, params["fc_W"], params["fc_b"])
    u_hat, p_hat = predict(X, p_r, params["W_obj"], params["W_rel"])
    return ForwardState(e=es, z=zs, z_bar=z_bar, p_r=p_r, u_hat=u_hat, p_hat=p_hat)
