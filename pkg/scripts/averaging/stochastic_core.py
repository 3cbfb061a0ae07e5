"""
Dense stochastic-matrix arithmetic for averaging dynamics
- row-stochastic matrices and agent state blocks
- the diameter / mixing / state-diameter functionals
- threshold graphs and spanning rooted tree checks
"""

import logging
from dataclasses import dataclass
from typing import Iterable, List, Tuple

import networkx as nx
import numpy as np

from .errors import (
    DimensionMismatch,
    GammaOutOfRange,
    NegativeEntry,
    NonFiniteEntry,
    NonSquare,
    RowSumOutOfTolerance,
)

logger = logging.getLogger(__name__)

# Row sums farther than this from 1 are rejected, closer ones are renormalized
ROW_SUM_TOL = 1e-9
# Tolerance for identities that hold in exact arithmetic
EXACT_TOL = 1e-12
DEFAULT_GAMMA = 0.01


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class StochasticMatrix:
    """Nonnegative n x n matrix whose rows sum to one"""

    entries: np.ndarray

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    def to_json(self) -> List[List[float]]:
        return self.entries.tolist()

    @classmethod
    def from_json(cls, rows) -> 'StochasticMatrix':
        return make_stochastic(rows)

    def __repr__(self):
        return f"StochasticMatrix(n={self.n})"


@dataclass(frozen=True, eq=False)
class StateBlock:
    """n agents, each holding a point in R^m"""

    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2:
            raise DimensionMismatch(f"state block must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteEntry("state block has non-finite entries")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def to_json(self) -> List[List[float]]:
        return self.values.tolist()

    @classmethod
    def from_json(cls, rows) -> 'StateBlock':
        return make_state(rows)

    def __add__(self, other: 'StateBlock') -> 'StateBlock':
        if self.values.shape != other.values.shape:
            raise DimensionMismatch(f"{self.values.shape} vs {other.values.shape}")
        return StateBlock(_frozen(self.values + other.values))

    def __repr__(self):
        return f"StateBlock(n={self.n}, m={self.m})"


@dataclass(frozen=True)
class DirectedGraph:
    """
    Directed graph on vertices 0..n-1

    An edge (j, i) means information flows from j to i, i.e. a_ij > gamma.
    """

    n: int
    edges: frozenset

    def __post_init__(self):
        for j, i in self.edges:
            if not (0 <= j < self.n and 0 <= i < self.n):
                raise DimensionMismatch(f"edge ({j}, {i}) outside [0, {self.n})")

    def to_networkx(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(range(self.n))
        g.add_edges_from(self.edges)
        return g


def make_state(values) -> StateBlock:
    """Build a StateBlock; a 1-D input is read as one coordinate per agent"""
    array = np.asarray(values, dtype=float)
    if array.ndim == 1:
        array = array.reshape(-1, 1)
    return StateBlock(_frozen(array))


def make_stochastic(entries) -> StochasticMatrix:
    """
    Validate a square array as row-stochastic

    Rows whose sum is within ROW_SUM_TOL of one are divided by their sum so
    that float drift from long products does not accumulate. Negative entries
    of magnitude below EXACT_TOL are rounding noise and are clipped to zero.
    """
    array = np.array(entries, dtype=float)
    if array.ndim != 2 or array.shape[0] != array.shape[1] or array.shape[0] == 0:
        raise NonSquare(f"expected a non-empty square array, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise NonFiniteEntry("matrix has non-finite entries")
    if array.min() < -EXACT_TOL:
        i, j = np.unravel_index(np.argmin(array), array.shape)
        raise NegativeEntry(f"entry ({i}, {j}) = {array[i, j]!r} is negative")
    np.clip(array, 0.0, None, out=array)

    row_sums = array.sum(axis=1)
    worst = np.max(np.abs(row_sums - 1.0))
    if worst > ROW_SUM_TOL:
        row = int(np.argmax(np.abs(row_sums - 1.0)))
        raise RowSumOutOfTolerance(f"row {row} sums to {row_sums[row]!r}")
    array /= row_sums[:, None]
    return StochasticMatrix(_frozen(array))


def identity(n: int) -> StochasticMatrix:
    return StochasticMatrix(_frozen(np.eye(n)))


def uniform_averaging(n: int) -> StochasticMatrix:
    """The rank-one projector (1/n) e e^T"""
    return StochasticMatrix(_frozen(np.full((n, n), 1.0 / n)))


def diam(A: StochasticMatrix) -> float:
    """Half the largest l1 distance between two rows"""
    a = A.entries
    if a.shape[0] == 1:
        return 0.0
    return float(0.5 * np.abs(a[:, None, :] - a[None, :, :]).sum(axis=2).max())


def mixing(A: StochasticMatrix) -> float:
    """Smallest overlap sum_l min(a_il, a_jl) over pairs of rows"""
    a = A.entries
    return float(np.minimum(a[:, None, :], a[None, :, :]).sum(axis=2).min())


def state_diameter(x: StateBlock) -> float:
    """Largest pairwise l-infinity distance between agent states"""
    return float(np.ptp(x.values, axis=0).max())


def apply(A: StochasticMatrix, x: StateBlock) -> StateBlock:
    if A.n != x.n:
        raise DimensionMismatch(f"matrix has n={A.n}, state has n={x.n}")
    return StateBlock(_frozen(A.entries @ x.values))


def compose(A: StochasticMatrix, B: StochasticMatrix) -> StochasticMatrix:
    """The product A B, revalidated as row-stochastic"""
    if A.n != B.n:
        raise DimensionMismatch(f"cannot compose n={A.n} with n={B.n}")
    return make_stochastic(A.entries @ B.entries)


def graph_of(A: StochasticMatrix, gamma: float = DEFAULT_GAMMA) -> DirectedGraph:
    if not 0.0 < gamma < 1.0:
        raise GammaOutOfRange(f"gamma must lie in (0, 1), got {gamma}")
    rows, cols = np.nonzero(A.entries > gamma)
    return DirectedGraph(A.n, frozenset((int(j), int(i)) for i, j in zip(rows, cols)))


def union_graphs(graphs: Iterable[DirectedGraph]) -> DirectedGraph:
    graphs = list(graphs)
    if not graphs:
        raise ValueError("union of an empty list of graphs")
    n = graphs[0].n
    for g in graphs[1:]:
        if g.n != n:
            raise DimensionMismatch(f"graphs on {n} and {g.n} vertices")
    return DirectedGraph(n, frozenset().union(*(g.edges for g in graphs)))


def has_spanning_rooted_tree(G: DirectedGraph) -> bool:
    """
    True iff some vertex reaches every vertex along directed edges

    Decided on the strongly-connected-component condensation: a root exists
    exactly when the condensation has a single source component.
    """
    condensed = nx.condensation(G.to_networkx())
    sources = [c for c, degree in condensed.in_degree() if degree == 0]
    return len(sources) == 1


def column_deviation(A: StochasticMatrix) -> float:
    """max_j |sum_i a_ij - 1|"""
    return float(np.max(np.abs(A.entries.sum(axis=0) - 1.0)))


def is_doubly_stochastic(A: StochasticMatrix, tol: float = EXACT_TOL) -> bool:
    return column_deviation(A) <= tol


def consensus_weights(Phi: StochasticMatrix) -> Tuple[np.ndarray, float]:
    """
    Read off the limit vector pi of a nearly rank-one product Phi ~ e pi^T

    Returns the row average of Phi and diam(Phi), which bounds how far any
    row is from that average in total variation.
    """
    pi = Phi.entries.mean(axis=0)
    return pi, diam(Phi)


def metropolis_weights(graph: nx.Graph) -> StochasticMatrix:
    """Symmetric Metropolis weights 1/(1 + max(deg_i, deg_j)) of an undirected graph"""
    n = graph.number_of_nodes()
    nodes = sorted(graph.nodes())
    index = {v: k for k, v in enumerate(nodes)}
    degrees = dict(graph.degree())
    w = np.zeros((n, n))
    for u, v in graph.edges():
        if u == v:
            continue
        i, j = index[u], index[v]
        w[i, j] = w[j, i] = 1.0 / (1 + max(degrees[u], degrees[v]))
    w[np.diag_indices(n)] = 1.0 - w.sum(axis=1)
    return make_stochastic(w)


def matrix_to_csv_rows(A: StochasticMatrix) -> List[Tuple[int, int, float]]:
    """Rows of the `row,col,value` CSV export"""
    n = A.n
    return [(i, j, float(A.entries[i, j])) for i in range(n) for j in range(n)]

