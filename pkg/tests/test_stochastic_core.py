import json

import networkx as nx
import numpy as np
import pytest

from averaging.errors import (
    DimensionMismatch,
    GammaOutOfRange,
    NegativeEntry,
    NonFiniteEntry,
    NonSquare,
    RowSumOutOfTolerance,
)
from averaging.stochastic_core import (
    DirectedGraph,
    StateBlock,
    StochasticMatrix,
    apply,
    column_deviation,
    compose,
    consensus_weights,
    diam,
    graph_of,
    has_spanning_rooted_tree,
    identity,
    is_doubly_stochastic,
    make_state,
    make_stochastic,
    matrix_to_csv_rows,
    metropolis_weights,
    mixing,
    state_diameter,
    uniform_averaging,
    union_graphs,
)
from conftest import random_stochastic

LOWER = [[1.0, 0.0], [0.5, 0.5]]


class TestMakeStochastic:
    def test_identity_accepted(self):
        A = make_stochastic(np.eye(2))
        assert A.n == 2
        assert np.array_equal(A.entries, np.eye(2))

    def test_exact_rows_accepted(self):
        A = make_stochastic([[0.5, 0.5], [1.0, 0.0]])
        assert A.entries[1, 0] == 1.0

    def test_row_sum_too_large(self):
        with pytest.raises(RowSumOutOfTolerance):
            make_stochastic([[0.5, 0.6], [1, 0]])

    def test_small_drift_renormalized(self):
        A = make_stochastic([[0.5 + 1e-11, 0.5], [0.25, 0.75]])
        assert A.entries.sum(axis=1) == pytest.approx([1.0, 1.0], abs=1e-15)

    def test_negative_entry(self):
        with pytest.raises(NegativeEntry):
            make_stochastic([[1.5, -0.5], [0, 1]])

    def test_non_square(self):
        with pytest.raises(NonSquare):
            make_stochastic([[1.0, 0.0]])

    def test_non_finite(self):
        with pytest.raises(NonFiniteEntry):
            make_stochastic([[np.nan, 1.0], [0.0, 1.0]])

    def test_entries_are_read_only(self):
        A = make_stochastic(np.eye(3))
        with pytest.raises(ValueError):
            A.entries[0, 0] = 0.5

    def test_json_round_trip(self):
        A = make_stochastic(LOWER)
        again = StochasticMatrix.from_json(json.loads(json.dumps(A.to_json())))
        assert np.array_equal(again.entries, A.entries)

    def test_csv_rows(self):
        rows = matrix_to_csv_rows(make_stochastic(LOWER))
        assert rows[0] == (0, 0, 1.0)
        assert rows[-1] == (1, 1, 0.5)
        assert len(rows) == 4


class TestFunctionals:
    def test_diam_examples(self):
        assert diam(identity(2)) == 1.0
        assert diam(uniform_averaging(3)) == 0.0
        assert diam(make_stochastic(LOWER)) == pytest.approx(0.5)

    def test_diam_single_agent(self):
        assert diam(identity(1)) == 0.0

    def test_mixing_examples(self):
        assert mixing(identity(2)) == 0.0
        assert mixing(uniform_averaging(3)) == pytest.approx(1.0)
        assert mixing(make_stochastic(LOWER)) == pytest.approx(0.5)

    def test_state_diameter_examples(self):
        assert state_diameter(make_state([[1.0], [1.0]])) == 0.0
        assert state_diameter(make_state([0.0, 3.0])) == 3.0
        assert state_diameter(make_state([[0, 0], [1, -2], [3, 1]])) == 3.0

    def test_state_block_rejects_non_finite(self):
        with pytest.raises(NonFiniteEntry):
            make_state([[np.inf]])

    def test_state_add_shape_mismatch(self):
        with pytest.raises(DimensionMismatch):
            make_state([1.0, 2.0]) + make_state([1.0, 2.0, 3.0])


class TestApplyCompose:
    def test_identity_apply(self, rng):
        x = make_state(rng.normal(size=(4, 2)))
        assert np.array_equal(apply(identity(4), x).values, x.values)

    def test_uniform_apply_is_mean(self, rng):
        x = make_state(rng.normal(size=(3, 2)))
        y = apply(uniform_averaging(3), x)
        assert y.values == pytest.approx(np.tile(x.values.mean(axis=0), (3, 1)))

    def test_hand_example(self):
        y = apply(make_stochastic(LOWER), make_state([2.0, 0.0]))
        assert y.values[:, 0].tolist() == [2.0, 1.0]

    def test_apply_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            apply(identity(2), make_state([1.0, 2.0, 3.0]))

    def test_compose_identities(self, rng):
        A = random_stochastic(rng, 4)
        assert compose(A, identity(4)).entries == pytest.approx(A.entries)
        assert compose(identity(4), A).entries == pytest.approx(A.entries)

    def test_compose_square(self):
        A = make_stochastic(LOWER)
        assert compose(A, A).entries == pytest.approx(np.array([[1.0, 0.0], [0.75, 0.25]]))

    def test_compose_mismatch(self):
        with pytest.raises(DimensionMismatch):
            compose(identity(2), identity(3))


class TestGraphs:
    def test_identity_self_loops(self):
        G = graph_of(identity(3), 0.5)
        assert G.edges == frozenset({(0, 0), (1, 1), (2, 2)})

    def test_uniform_below_threshold(self):
        assert graph_of(uniform_averaging(3), 0.5).edges == frozenset()

    def test_strict_threshold(self):
        G = graph_of(make_stochastic([[0.6, 0.4], [0.4, 0.6]]), 0.5)
        assert G.edges == frozenset({(0, 0), (1, 1)})
        assert (0, 0) not in graph_of(make_stochastic([[0.5, 0.5], [0.5, 0.5]]), 0.5).edges

    def test_edge_direction(self):
        # a_10 > gamma means agent 1 listens to agent 0: edge 0 -> 1
        G = graph_of(make_stochastic(LOWER), 0.1)
        assert (0, 1) in G.edges
        assert (1, 0) not in G.edges

    @pytest.mark.parametrize('gamma', [0.0, 1.0, -0.1])
    def test_gamma_out_of_range(self, gamma):
        with pytest.raises(GammaOutOfRange):
            graph_of(identity(2), gamma)

    def test_union(self):
        G = DirectedGraph(3, frozenset({(0, 1)}))
        H = DirectedGraph(3, frozenset({(1, 2)}))
        empty = DirectedGraph(3, frozenset())
        assert union_graphs([G, G]).edges == G.edges
        assert union_graphs([G, empty]).edges == G.edges
        assert union_graphs([G, H]).edges == frozenset({(0, 1), (1, 2)})

    def test_union_mismatch(self):
        with pytest.raises(DimensionMismatch):
            union_graphs([DirectedGraph(2, frozenset()), DirectedGraph(3, frozenset())])

    def test_edge_outside_range(self):
        with pytest.raises(DimensionMismatch):
            DirectedGraph(2, frozenset({(0, 2)}))

    def test_rooted_tree_examples(self):
        assert has_spanning_rooted_tree(DirectedGraph(1, frozenset()))
        assert has_spanning_rooted_tree(DirectedGraph(3, frozenset({(0, 1), (1, 2)})))
        assert not has_spanning_rooted_tree(DirectedGraph(2, frozenset()))

    def test_rooted_tree_two_sources(self):
        # 0 -> 2 <- 1: nobody reaches both 0 and 1
        assert not has_spanning_rooted_tree(DirectedGraph(3, frozenset({(0, 2), (1, 2)})))

    def test_rooted_tree_matches_brute_force(self, rng):
        for _ in range(200):
            n = int(rng.integers(1, 7))
            edges = frozenset((int(j), int(i)) for j in range(n) for i in range(n)
                              if j != i and rng.random() < 0.25)
            G = DirectedGraph(n, edges)
            g = G.to_networkx()
            brute = any(len(nx.descendants(g, r)) == n - 1 for r in range(n))
            assert has_spanning_rooted_tree(G) == brute

    def test_threshold_monotone(self, rng):
        A = random_stochastic(rng, 6)
        assert graph_of(A, 0.3).edges <= graph_of(A, 0.1).edges


class TestHelpers:
    def test_metropolis_is_doubly_stochastic(self):
        W = metropolis_weights(nx.cycle_graph(5))
        assert is_doubly_stochastic(W)
        assert W.entries[0, 1] == pytest.approx(1.0 / 3.0)
        assert column_deviation(W) <= 1e-12

    def test_consensus_weights(self):
        pi, residual = consensus_weights(uniform_averaging(4))
        assert pi == pytest.approx(np.full(4, 0.25))
        assert residual == 0.0


class TestContractionProperties:
    """Pairs of random stochastic matrices and state blocks, n in 2..8, m in 1..3"""

    def test_random_pairs(self, rng):
        worst = 0.0
        for _ in range(1000):
            n = int(rng.integers(2, 9))
            m = int(rng.integers(1, 4))
            A, B = random_stochastic(rng, n), random_stochastic(rng, n)
            x = make_state(rng.normal(scale=5.0, size=(n, m)))
            y = make_state(rng.normal(scale=5.0, size=(n, m)))
            AB = compose(A, B)
            pi = rng.dirichlet(np.ones(n))
            d_x = state_diameter(x)

            checks = [
                abs(mixing(A) + diam(A) - 1.0),
                diam(AB) - (1.0 - mixing(A)) * diam(B),
                diam(AB) - diam(A) * diam(B),
                state_diameter(apply(A, x)) - diam(A) * d_x,
                state_diameter(x + y) - d_x - state_diameter(y),
                np.abs(x.values - pi @ x.values).max() - d_x,
                d_x - 2.0 * np.abs(x.values).max(),
            ]
            worst = max(worst, max(checks))
        assert worst <= 1e-10
