import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from edgesgg.graph import (
    Detection, GraphError, build_edge_dual_graph, build_primitive_graph, dual_neighborhood,
    geometry_descriptor, scene_from_json, validate_dual_counts,
)
from oracles import complete_edges, enumerate_dual_pairs


def make_dets(n, d_o=4):
    rng = np.random.default_rng(n)
    out = []
    for i in range(n):
        x, y = rng.uniform(0, 0.6, size=2)
        w, h = rng.uniform(0.1, 0.3, size=2)
        out.append(Detection(i, tuple(rng.normal(size=d_o)), (x, y, x + w, y + h), label=i % 3))
    return out


def star_graph():
    dets = make_dets(4)
    return build_primitive_graph(dets, "pairs", [(0, 1), (0, 2), (0, 3)])


class TestPrimitiveGraph:
    def test_four_detections_complete(self):
        g = build_primitive_graph(make_dets(4))
        assert len(g.nodes) == 4
        assert len(g.edges) == 6

    def test_single_detection_has_no_edges(self):
        g = build_primitive_graph(make_dets(1))
        assert len(g.nodes) == 1 and g.edges == ()

    def test_two_detections_one_edge_two_directions(self):
        g = build_primitive_graph(make_dets(2))
        assert g.edges == ((0, 1),)
        assert g.relation_features.shape == (1, 2, 16)
        assert not np.allclose(g.relation_features[0, 0], g.relation_features[0, 1])

    def test_edges_are_lexicographic(self):
        dets = make_dets(5)[::-1]
        g = build_primitive_graph(dets)
        assert list(g.edges) == sorted(g.edges)
        assert all(a < b for a, b in g.edges)

    def test_empty_scene(self):
        with pytest.raises(GraphError, match="empty scene"):
            build_primitive_graph([])

    def test_dimension_mismatch(self):
        dets = make_dets(2)
        dets[1] = Detection(1, (1.0,), dets[1].box)
        with pytest.raises(GraphError, match="dimension mismatch"):
            build_primitive_graph(dets)

    @pytest.mark.parametrize("pairs", [[(0, 0)], [(0, 1), (1, 0)], [(0, 9)]])
    def test_bad_pairs_rejected(self, pairs):
        with pytest.raises(GraphError):
            build_primitive_graph(make_dets(3), "pairs", pairs)

    def test_detection_invariants(self):
        with pytest.raises(GraphError):
            Detection(0, (), (0.5, 0.1, 0.2, 0.3))
        with pytest.raises(GraphError):
            Detection(0, (), (0.1, 0.1, 0.2, 1.3))
        with pytest.raises(GraphError):
            Detection(0, (), (0.1, 0.1, 0.2, 0.3), label=0, label_scores=(0.2, 0.8))
        Detection(0, (), (0.1, 0.1, 0.2, 0.3), label=1, label_scores=(0.2, 0.8))

    def test_geometry_descriptor_layout(self):
        s, o = (0.1, 0.1, 0.3, 0.5), (0.2, 0.0, 0.6, 0.2)
        d = geometry_descriptor(s, o)
        assert d.shape == (16,)
        np.testing.assert_allclose(d[8:12], [0.1, 0.0, 0.6, 0.5])
        np.testing.assert_allclose(d[12:14], [0.4 - 0.2, 0.1 - 0.3])
        np.testing.assert_allclose(d[14:], [np.log(0.2 / 0.4), np.log(0.4 / 0.2)])


class TestEdgeDual:
    def test_k4_example(self):
        dg = build_edge_dual_graph(build_primitive_graph(make_dets(4)))
        assert len(dg.dual_nodes) == 6
        assert len(dg.dual_edges) == 12

    def test_single_edge(self):
        dg = build_edge_dual_graph(build_primitive_graph(make_dets(2)))
        assert dg.dual_nodes == (0,)
        assert dg.dual_edges == ()

    def test_star_is_triangle(self):
        g = star_graph()
        dg = build_edge_dual_graph(g)
        assert len(dg.dual_nodes) == 3
        assert list(dg.dual_edges) == enumerate_dual_pairs(list(g.edges))
        assert list(dg.dual_edges) == [(0, 1, 0), (0, 2, 0), (1, 2, 0)]

    def test_no_edges(self):
        with pytest.raises(GraphError, match="no relations to dualize"):
            build_edge_dual_graph(build_primitive_graph(make_dets(1)))

    def test_isolated_node_leaves_no_trace(self):
        g = build_primitive_graph(make_dets(4), "pairs", [(0, 1), (1, 2)])
        dg = build_edge_dual_graph(g)
        assert {s for _, _, s in dg.dual_edges} == {1}

    def test_incidences_are_both_directions(self):
        dg = build_edge_dual_graph(build_primitive_graph(make_dets(4)))
        inc = dg.incidences()
        assert len(inc) == 24 == dg.incidence_count
        assert {(i, j) for i, j, _ in inc} == {(j, i) for i, j, _ in inc}


class TestNeighborhood:
    def test_k4_every_edge_has_four(self):
        dg = build_edge_dual_graph(build_primitive_graph(make_dets(4)))
        edges = complete_edges(4)
        for k in range(6):
            nb = dual_neighborhood(dg, k)
            expected = sorted((j, s) for i, j, s in
                              [(a, b, c) for a, b, c in enumerate_dual_pairs(edges)] +
                              [(b, a, c) for a, b, c in enumerate_dual_pairs(edges)] if i == k)
            assert nb == expected
            assert len(nb) == 4

    def test_single_edge_empty(self):
        dg = build_edge_dual_graph(build_primitive_graph(make_dets(2)))
        assert dual_neighborhood(dg, 0) == []

    def test_star_center(self):
        dg = build_edge_dual_graph(star_graph())
        assert dual_neighborhood(dg, 0) == [(1, 0), (2, 0)]

    def test_unknown_edge(self):
        dg = build_edge_dual_graph(build_primitive_graph(make_dets(2)))
        with pytest.raises(GraphError):
            dual_neighborhood(dg, 5)


class TestDualCounts:
    @pytest.mark.parametrize("n,expected", [(4, (6, 12)), (2, (1, 0)), (5, (10, 30))])
    def test_examples(self, n, expected):
        assert validate_dual_counts(n) == expected

    def test_k5_by_enumeration(self):
        assert len(enumerate_dual_pairs(complete_edges(5))) == 30

    def test_too_small(self):
        with pytest.raises(GraphError):
            validate_dual_counts(1)

    @pytest.mark.parametrize("n", range(2, 9))
    def test_complete_graphs_match_oracle(self, n):
        dg = build_edge_dual_graph(build_primitive_graph(make_dets(n)))
        oracle = enumerate_dual_pairs(complete_edges(n))
        assert (len(dg.dual_nodes), len(dg.dual_edges)) == validate_dual_counts(n)
        assert len(oracle) == len(dg.dual_edges)


edge_sets = st.integers(2, 7).flatmap(
    lambda n: st.tuples(
        st.just(n),
        st.lists(st.sampled_from(list(itertools.combinations(range(n), 2))),
                 min_size=1, unique=True),
    )
)


@settings(max_examples=60, deadline=None)
@given(edge_sets)
def test_dual_adjacency_iff_one_shared_node(case):
    n, pairs = case
    g = build_primitive_graph(make_dets(n), "pairs", pairs)
    dg = build_edge_dual_graph(g)
    assert list(dg.dual_edges) == enumerate_dual_pairs(list(g.edges))
    assert all(i != j for i, j, _ in dg.dual_edges)
    for i, j, s in dg.dual_edges:
        assert set(g.edges[i]) & set(g.edges[j]) == {s}


def test_build_is_deterministic():
    a = build_edge_dual_graph(build_primitive_graph(make_dets(6)))
    b = build_edge_dual_graph(build_primitive_graph(make_dets(6)))
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
    ga, gb = build_primitive_graph(make_dets(6)), build_primitive_graph(make_dets(6))
    assert ga.relation_features.tobytes() == gb.relation_features.tobytes()


def test_scene_json_round_trip():
    g = build_primitive_graph(make_dets(4), "pairs", [(0, 1), (2, 3)])
    g2 = scene_from_json(json.loads(json.dumps(g.to_dict())))
    assert g2.edges == g.edges
    assert [d.box for d in g2.nodes] == [d.box for d in g.nodes]
    doc = g.to_dict()
    del doc["edges"]
    assert len(scene_from_json(doc).edges) == 6
