import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spheresig import geometry, sampling
from spheresig.errors import EmptyInput
from spheresig.neighbors import (
    Cap,
    KNearest,
    brute_force_neighbors,
    build_neighbor_graph,
    content_key,
    graphs_equal,
)
from spheresig.sampling import Fibonacci, PointSet


def fib(n):
    return sampling.generate_locations(Fibonacci(n))


def random_set(rng, n):
    return PointSet(points=sampling.uniform_sphere(n, rng))


class TestCap:
    def test_all_edges_within_radius(self):
        ps = fib(300)
        g = build_neighbor_graph(ps, ps, Cap(radius=0.4))
        assert (g.distances <= 0.4 + 1e-12).all()

    def test_self_edge_at_zero(self):
        ps = fib(100)
        g = build_neighbor_graph(ps, ps, Cap(radius=0.3))
        firsts = g.indices[g.offsets[:-1]]
        assert np.array_equal(firsts, np.arange(100))
        assert (g.distances[g.offsets[:-1]] == 0.0).all()
        assert g.degenerate[g.offsets[:-1]].all()

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            inputs = random_set(rng, 200)
            outputs = random_set(rng, 150)
            r = rng.uniform(0.1, 1.0)
            fast = build_neighbor_graph(inputs, outputs, Cap(radius=r))
            slow = brute_force_neighbors(inputs, outputs, Cap(radius=r))
            assert graphs_equal(fast, slow)

    def test_boundary_point_included(self):
        # An input exactly at geodesic distance r must stay in (closed cap).
        r = 0.5
        inputs = PointSet(
            points=np.array(
                [[1.0, 0.0, 0.0], [np.cos(r), np.sin(r), 0.0], [-1.0, 0.0, 0.0]]
            )
        )
        out = PointSet(points=np.array([[1.0, 0.0, 0.0]]))
        g = build_neighbor_graph(inputs, out, Cap(radius=r))
        assert set(g.indices.tolist()) == {0, 1}

    def test_edges_sorted_by_distance_then_index(self):
        rng = np.random.default_rng(1)
        ps = random_set(rng, 250)
        g = build_neighbor_graph(ps, ps, Cap(radius=0.5))
        for o in range(len(ps)):
            d = g.distances[g.offsets[o] : g.offsets[o + 1]]
            i = g.indices[g.offsets[o] : g.offsets[o + 1]]
            order = np.lexsort((i, d))
            assert np.array_equal(order, np.arange(len(d)))


class TestKNearest:
    def test_exact_degree(self):
        ps = fib(120)
        g = build_neighbor_graph(ps, ps, KNearest(k=6))
        assert (g.degrees() == 6).all()

    def test_k_clamps_to_input_count(self):
        ps = fib(4)
        g = build_neighbor_graph(ps, ps, KNearest(k=10))
        assert (g.degrees() == 4).all()

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            inputs = random_set(rng, 180)
            outputs = random_set(rng, 60)
            k = int(rng.integers(1, 12))
            fast = build_neighbor_graph(inputs, outputs, KNearest(k=k))
            slow = brute_force_neighbors(inputs, outputs, KNearest(k=k))
            assert graphs_equal(fast, slow)

    def test_tie_break_prefers_lower_index(self):
        # Four equidistant equator points seen from the north pole; k = 2
        # must pick indices 0 and 1 deterministically.
        eq = np.array(
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]]
        )
        out = PointSet(points=np.array([[0.0, 0.0, 1.0]]))
        fast = build_neighbor_graph(PointSet(points=eq), out, KNearest(k=2))
        slow = brute_force_neighbors(PointSet(points=eq), out, KNearest(k=2))
        assert graphs_equal(fast, slow)
        assert set(fast.indices.tolist()) == {0, 1}


class TestGraphStructure:
    def test_azimuths_match_scalar_oracle(self):
        ps = fib(64)
        g = build_neighbor_graph(ps, ps, KNearest(k=4))
        edge_out = g.edge_outputs()
        for e in range(g.n_edges):
            if g.degenerate[e]:
                assert g.azimuths[e] == 0.0
                continue
            expected = geometry.relative_azimuth(
                ps.points[edge_out[e]], ps.points[g.indices[e]]
            )
            assert g.azimuths[e] == pytest.approx(float(expected), abs=1e-12)

    def test_empty_inputs_raise(self):
        with pytest.raises(EmptyInput):
            build_neighbor_graph(PointSet(points=np.empty((0, 3))), fib(5), KNearest(k=1))

    def test_empty_outputs_ok(self):
        g = build_neighbor_graph(fib(10), PointSet(points=np.empty((0, 3))), KNearest(k=1))
        assert g.n_outputs == 0
        assert g.n_edges == 0

    def test_isolated_output_has_no_edges(self):
        inputs = PointSet(points=np.array([[1.0, 0.0, 0.0]]))
        outputs = PointSet(points=np.array([[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]))
        g = build_neighbor_graph(inputs, outputs, Cap(radius=0.1))
        assert g.degrees().tolist() == [0, 1]


class TestContentKey:
    def test_stable_and_distinct(self):
        a, b = fib(50), fib(60)
        k1 = content_key(a, a, Cap(radius=0.3))
        assert k1 == content_key(a, a, Cap(radius=0.3))
        assert k1 != content_key(a, a, Cap(radius=0.4))
        assert k1 != content_key(a, a, KNearest(k=3))
        assert k1 != content_key(b, b, Cap(radius=0.3))
        assert len(k1) == 32


@given(st.integers(5, 60), st.integers(1, 8), st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_knn_property_fast_equals_brute(n, k, seed):
    rng = np.random.default_rng(seed)
    inputs = random_set(rng, n)
    outputs = random_set(rng, max(2, n // 2))
    fast = build_neighbor_graph(inputs, outputs, KNearest(k=k))
    slow = brute_force_neighbors(inputs, outputs, KNearest(k=k))
    assert graphs_equal(fast, slow)


@given(st.integers(5, 60), st.floats(0.05, 2.0), st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_cap_property_fast_equals_brute(n, radius, seed):
    rng = np.random.default_rng(seed)
    inputs = random_set(rng, n)
    outputs = random_set(rng, max(2, n // 2))
    fast = build_neighbor_graph(inputs, outputs, Cap(radius=radius))
    slow = brute_force_neighbors(inputs, outputs, Cap(radius=radius))
    assert graphs_equal(fast, slow)
