"""
Generators for adapted random weight-matrix chains {W(t)}

Each generator owns a seeded numpy Generator and a small filtration state
(token holder, or nothing for memoryless chains). Given that state it can
draw W(t), report E[W(t) | F(t-1)] when it has a closed form, resample W(t)
from the conditional law, and forecast E[W(tau) | F(t)] a few steps ahead.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Callable, List, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np

from .errors import (
    BaseNotDoublyStochastic,
    ConditionalLawUnavailable,
    DisconnectedGraph,
    DimensionMismatch,
    POutOfRange,
)
from .stochastic_core import (
    DEFAULT_GAMMA,
    EXACT_TOL,
    StochasticMatrix,
    column_deviation,
    graph_of,
    has_spanning_rooted_tree,
    is_doubly_stochastic,
    make_stochastic,
    union_graphs,
)

logger = logging.getLogger(__name__)

DEFAULT_RESAMPLES = 200


@dataclass(frozen=True)
class ChainStep:
    """One realized weight matrix W(t) with the filtration state it was drawn from"""

    t: int
    W: StochasticMatrix
    cond_exp: Optional[StochasticMatrix]
    state: Any = None


def _wrap(array: np.ndarray) -> StochasticMatrix:
    # Generators build their matrices exactly; only freeze them
    array.setflags(write=False)
    return StochasticMatrix(array)


class ChainGenerator(ABC):
    """
    Stateful sampler of a random chain W(t0+1), W(t0+2), ...

    `t` is the index of the last realized matrix (t0 before any step), so the
    next call to step() returns W(t+1) drawn given the state at time t.
    """

    kind = 'abstract'
    supports_resampling = True

    def __init__(self, n: int, seed=None, t0: int = 1):
        if seed is None:
            # fresh entropy is fixed here; clones and reports replay from it
            seed = np.random.SeedSequence().entropy
        self.n = n
        self.seed = seed
        self.t0 = t0
        self.t = t0
        self.rng = np.random.default_rng(seed)
        self._state = self._initial_state(self.rng)

    def _initial_state(self, rng: np.random.Generator) -> Any:
        return None

    @abstractmethod
    def _draw(self, state: Any, t: int, rng: np.random.Generator) -> Tuple[np.ndarray, Any]:
        """Return (W(t), next state) given the state at time t-1"""

    @abstractmethod
    def clone(self, seed) -> 'ChainGenerator':
        """Fresh generator with the same law and a different seed"""

    def describe(self) -> dict:
        return {'type': self.kind, 'n': self.n, 't0': self.t0}

    @property
    def state(self) -> Any:
        return self._state

    def conditional_expectation(self, state: Any, t: int) -> Optional[StochasticMatrix]:
        """E[W(t) | F(t-1)] when the chain knows it in closed form"""
        return None

    def resample(self, state: Any, t: int, rng: np.random.Generator) -> StochasticMatrix:
        """Draw W(t) afresh from its law given the state at t-1, without moving the chain"""
        if not self.supports_resampling:
            raise ConditionalLawUnavailable(f"{self.kind} chain cannot resample")
        W, _ = self._draw(state, t, rng)
        return _wrap(W)

    def step(self) -> ChainStep:
        t = self.t + 1
        state = self._state
        W, self._state = self._draw(state, t, self.rng)
        self.t = t
        return ChainStep(t=t, W=_wrap(W), cond_exp=self.conditional_expectation(state, t), state=state)

    def estimate_conditional(self, state: Any, t: int, resamples: int,
                             rng: np.random.Generator) -> Tuple[StochasticMatrix, np.ndarray]:
        """Monte Carlo E[W(t) | F(t-1)] and the entrywise standard error"""
        if not self.supports_resampling:
            raise ConditionalLawUnavailable(f"{self.kind} chain cannot resample")
        draws = np.stack([self._draw(state, t, rng)[0] for _ in range(resamples)])
        se = draws.std(axis=0, ddof=1) / np.sqrt(resamples) if resamples > 1 else np.zeros((self.n, self.n))
        return make_stochastic(draws.mean(axis=0)), se

    def forecast(self, state: Any, t: int, horizon: int,
                 resamples: int = DEFAULT_RESAMPLES,
                 rng: Optional[np.random.Generator] = None) -> Tuple[List[StochasticMatrix], bool]:
        """
        E[W(tau) | F(t)] for tau = t+1..t+horizon

        Returns the matrices and whether they are Monte Carlo estimates. The
        generic version simulates `resamples` paths forward from `state`.
        """
        if not self.supports_resampling:
            raise ConditionalLawUnavailable(f"{self.kind} chain cannot simulate forward")
        rng = rng if rng is not None else np.random.default_rng(0)
        sums = np.zeros((horizon, self.n, self.n))
        for _ in range(resamples):
            s = state
            for k in range(horizon):
                W, s = self._draw(s, t + 1 + k, rng)
                sums[k] += W
        return [make_stochastic(total / resamples) for total in sums], True


class StaticChain(ChainGenerator):
    """W(t) = A for every t"""

    kind = 'static'

    def __init__(self, A: StochasticMatrix, seed=None, t0: int = 1):
        self.A = A
        self._doubly = is_doubly_stochastic(A)
        super().__init__(A.n, seed, t0)

    def _draw(self, state, t, rng):
        return self.A.entries.copy(), state

    def conditional_expectation(self, state, t):
        return self.A if self._doubly else None

    def forecast(self, state, t, horizon, resamples=DEFAULT_RESAMPLES, rng=None):
        return [self.A] * horizon, False

    def clone(self, seed):
        return StaticChain(self.A, seed, self.t0)

    def describe(self):
        return {**super().describe(), 'matrix': self.A.to_json()}


def _checked_graph(graph: nx.Graph) -> nx.Graph:
    if graph.is_directed():
        raise DisconnectedGraph("expected an undirected graph")
    if graph.number_of_nodes() < 2 or not nx.is_connected(graph):
        raise DisconnectedGraph("graph must be connected with at least two nodes")
    if sorted(graph.nodes()) != list(range(graph.number_of_nodes())):
        graph = nx.convert_node_labels_to_integers(graph, ordering='sorted')
    return graph


class TokenChain(ChainGenerator):
    """
    Token passing over a connected undirected graph

    The holder h picks a uniform neighbor s. With probability 1/2 it hands over
    the token and s averages with h; otherwise h keeps the token and averages
    with s. Only the receiver's row of W(t) differs from the identity.
    """

    kind = 'token'

    def __init__(self, graph: nx.Graph, seed=None, t0: int = 1, initial_holder: Optional[int] = None):
        self.graph = _checked_graph(graph)
        n = self.graph.number_of_nodes()
        self.neighbors = [sorted(v for v in self.graph.neighbors(h) if v != h) for h in range(n)]
        self.initial_holder = initial_holder
        self._expected = [self._expected_matrix(h, n) for h in range(n)]
        super().__init__(n, seed, t0)

    def _initial_state(self, rng):
        if self.initial_holder is not None:
            return int(self.initial_holder)
        return int(rng.integers(self.n))

    def _expected_matrix(self, h: int, n: int) -> StochasticMatrix:
        v = np.eye(n)
        share = 1.0 / (4 * len(self.neighbors[h]))
        v[h, h] = 0.75
        for j in self.neighbors[h]:
            v[h, j] = share
            v[j, h] = share
            v[j, j] = 1.0 - share
        return _wrap(v)

    @property
    def holder(self) -> int:
        return self._state

    def holder_transition(self) -> np.ndarray:
        """Markov kernel of the token position"""
        P = np.zeros((self.n, self.n))
        for h in range(self.n):
            P[h, h] = 0.5
            for j in self.neighbors[h]:
                P[h, j] += 0.5 / len(self.neighbors[h])
        return P

    def _draw(self, state, t, rng):
        h = state
        s = self.neighbors[h][rng.integers(len(self.neighbors[h]))]
        passes = rng.random() < 0.5
        receiver, sender = (s, h) if passes else (h, s)
        W = np.eye(self.n)
        W[receiver, receiver] = 0.5
        W[receiver, sender] = 0.5
        return W, receiver

    def conditional_expectation(self, state, t):
        return self._expected[state]

    def forecast(self, state, t, horizon, resamples=DEFAULT_RESAMPLES, rng=None):
        P = self.holder_transition()
        stacked = np.stack([v.entries for v in self._expected])
        dist = np.zeros(self.n)
        dist[state] = 1.0
        out = []
        for _ in range(horizon):
            out.append(make_stochastic(np.tensordot(dist, stacked, axes=1)))
            dist = dist @ P
        return out, False

    def clone(self, seed):
        return TokenChain(self.graph, seed, self.t0, self.initial_holder)

    def describe(self):
        return {**super().describe(), 'edges': sorted(map(list, self.graph.edges()))}


class GossipChain(ChainGenerator):
    """i.i.d. pairwise gossip: a uniform edge fires and its endpoints meet at the midpoint"""

    kind = 'gossip'

    def __init__(self, graph: nx.Graph, seed=None, t0: int = 1):
        self.graph = _checked_graph(graph)
        n = self.graph.number_of_nodes()
        self.edges = sorted((min(u, v), max(u, v)) for u, v in self.graph.edges() if u != v)
        mean = np.zeros((n, n))
        for i, j in self.edges:
            mean += self._edge_matrix(i, j, n)
        self._mean = _wrap(mean / len(self.edges))
        super().__init__(n, seed, t0)

    @staticmethod
    def _edge_matrix(i: int, j: int, n: int) -> np.ndarray:
        W = np.eye(n)
        W[i, i] = W[j, j] = W[i, j] = W[j, i] = 0.5
        return W

    def _draw(self, state, t, rng):
        i, j = self.edges[rng.integers(len(self.edges))]
        return self._edge_matrix(i, j, self.n), state

    def conditional_expectation(self, state, t):
        return self._mean

    def forecast(self, state, t, horizon, resamples=DEFAULT_RESAMPLES, rng=None):
        return [self._mean] * horizon, False

    def clone(self, seed):
        return GossipChain(self.graph, seed, self.t0)

    def describe(self):
        return {**super().describe(), 'edges': [list(e) for e in self.edges]}


FailureSchedule = Union[float, Sequence[float], Callable[[int], float]]


class LinkFailureChain(ChainGenerator):
    """
    A doubly stochastic base schedule A(t) with independent Bernoulli link failures

    Off-diagonal weights are a_ij(t) b_ij(t); the lost mass goes back to the
    diagonal, so W(t) stays row-stochastic and E[W(t) | F(t-1)] keeps unit
    column sums.
    """

    kind = 'link_failure'

    def __init__(self, base: Sequence[StochasticMatrix], p: FailureSchedule, seed=None, t0: int = 1):
        base = list(base)
        if not base:
            raise BaseNotDoublyStochastic("empty base schedule")
        n = base[0].n
        for k, A in enumerate(base):
            if A.n != n:
                raise DimensionMismatch(f"base matrix {k} has n={A.n}, expected {n}")
            if not is_doubly_stochastic(A, 1e-9):
                raise BaseNotDoublyStochastic(
                    f"base matrix {k} column sums deviate by {column_deviation(A):.3e}")
        if not callable(p):
            values = [p] if np.isscalar(p) else list(p)
            for value in values:
                self._check_p(value)
        self.base = base
        self.p = p
        super().__init__(n, seed, t0)

    @staticmethod
    def _check_p(value: float) -> float:
        if not 0.0 <= value < 1.0:
            raise POutOfRange(f"failure probability must lie in [0, 1), got {value}")
        return value

    def base_at(self, t: int) -> StochasticMatrix:
        return self.base[(t - self.t0 - 1) % len(self.base)]

    def p_at(self, t: int) -> float:
        if callable(self.p):
            return self._check_p(float(self.p(t)))
        if np.isscalar(self.p):
            return float(self.p)
        return float(self.p[(t - self.t0 - 1) % len(self.p)])

    @staticmethod
    def _fold(offdiag: np.ndarray) -> np.ndarray:
        np.fill_diagonal(offdiag, 0.0)
        offdiag[np.diag_indices_from(offdiag)] = 1.0 - offdiag.sum(axis=1)
        return offdiag

    def _draw(self, state, t, rng):
        A = self.base_at(t).entries
        alive = rng.random((self.n, self.n)) >= self.p_at(t)
        return self._fold(A * alive), state

    def conditional_expectation(self, state, t):
        return _wrap(self._fold(self.base_at(t).entries * (1.0 - self.p_at(t))))

    def forecast(self, state, t, horizon, resamples=DEFAULT_RESAMPLES, rng=None):
        return [self.conditional_expectation(state, t + 1 + k) for k in range(horizon)], False

    def clone(self, seed):
        return LinkFailureChain(self.base, self.p, seed, self.t0)

    def describe(self):
        p = self.p if not callable(self.p) else getattr(self.p, '__name__', 'schedule')
        return {**super().describe(), 'p': p, 'base': [A.to_json() for A in self.base]}


def token_chain(graph: nx.Graph, seed=None, t0: int = 1, initial_holder: Optional[int] = None) -> TokenChain:
    return TokenChain(graph, seed, t0, initial_holder)


def pairwise_gossip_chain(graph: nx.Graph, seed=None, t0: int = 1) -> GossipChain:
    return GossipChain(graph, seed, t0)


def link_failure_chain(base: Sequence[StochasticMatrix], p: FailureSchedule, seed=None,
                       t0: int = 1) -> LinkFailureChain:
    return LinkFailureChain(base, p, seed, t0)


def static_chain(A: StochasticMatrix, seed=None, t0: int = 1) -> StaticChain:
    return StaticChain(A, seed, t0)


@dataclass
class AssumptionReport:
    """Outcome of the stochasticity and B-connectivity checks over sampled paths"""

    row_stochastic_ok: bool
    self_loops_ok: bool
    cond_column_sums_max_dev: float
    cond_column_sums_se: float
    b_connectivity_ok: bool
    B_used: int
    gamma_used: float
    trials: int
    windows_checked: int
    conditioning: str
    monte_carlo: bool
    seed: Any = None
    failures: List[str] = field(default_factory=list)

    @property
    def column_ok(self) -> bool:
        return self.cond_column_sums_max_dev <= EXACT_TOL + 3.0 * self.cond_column_sums_se

    @property
    def passed(self) -> bool:
        return self.row_stochastic_ok and self.self_loops_ok and self.column_ok and self.b_connectivity_ok

    def to_dict(self) -> dict:
        return {
            'row_stochastic_ok': self.row_stochastic_ok,
            'self_loops_ok': self.self_loops_ok,
            'cond_column_sums_max_dev': self.cond_column_sums_max_dev,
            'cond_column_sums_se': self.cond_column_sums_se,
            'b_connectivity_ok': self.b_connectivity_ok,
            'B_used': self.B_used,
            'gamma_used': self.gamma_used,
            'trials': self.trials,
            'windows_checked': self.windows_checked,
            'conditioning': self.conditioning,
            'monte_carlo': self.monte_carlo,
            'seed': seed_label(self.seed),
            'passed': self.passed,
            'failures': self.failures[:20],
        }


def seed_label(seed):
    """JSON-friendly form of an int seed or a spawned SeedSequence"""
    if isinstance(seed, np.random.SeedSequence):
        return {'entropy': seed.entropy, 'spawn_key': list(seed.spawn_key)}
    return seed


def seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def trial_seeds(seed, trials: int) -> List[np.random.SeedSequence]:
    """Independent child streams, one per trial"""
    return seed_sequence(seed).spawn(trials)


def verify_assumptions(gen: ChainGenerator, B: int, gamma: float = DEFAULT_GAMMA,
                       horizon: Optional[int] = None, trials: int = 10,
                       conditioning: str = 'window',
                       resamples: int = DEFAULT_RESAMPLES) -> AssumptionReport:
    """
    Check row-stochasticity, self-loops, column-stochasticity in expectation
    and conditional B-connectivity on `trials` independent sample paths

    conditioning='window' unions the graphs of E[W(tau) | F(kB)] over each
    window (the assumption as stated); 'step' unions the graphs of
    E[W(tau) | F(tau-1)] along the path, which is sufficient.
    """
    horizon = horizon if horizon is not None else 4 * B
    if B < 1 or horizon < B:
        raise ValueError(f"need B >= 1 and horizon >= B, got B={B}, horizon={horizon}")
    if conditioning not in ('window', 'step'):
        raise ValueError(f"unknown conditioning {conditioning!r}")
    if gen.conditional_expectation(gen.state, gen.t + 1) is None and not gen.supports_resampling:
        raise ConditionalLawUnavailable(f"{gen.kind} chain has no conditional law")

    row_ok = loops_ok = connect_ok = True
    max_dev = dev_se = 0.0
    monte_carlo = False
    failures = []
    windows = 0
    mc_rng = np.random.default_rng(seed_sequence(gen.seed).spawn(trials + 1)[-1])

    for trial, child in enumerate(trial_seeds(gen.seed, trials)):
        path = gen.clone(child)
        for _ in range(horizon // B):
            window_start, window_state = path.t, path.state
            if conditioning == 'window':
                expected, estimated = path.forecast(window_state, window_start, B, resamples, mc_rng)
                monte_carlo |= estimated
                window_graphs = [graph_of(E, gamma) for E in expected]
            else:
                window_graphs = []

            for _ in range(B):
                step = path.step()
                W = step.W.entries
                if np.max(np.abs(W.sum(axis=1) - 1.0)) > EXACT_TOL or W.min() < 0.0:
                    row_ok = False
                    failures.append(f"trial {trial}: W({step.t}) not row-stochastic")
                if np.any(np.diag(W) <= gamma):
                    loops_ok = False
                    failures.append(f"trial {trial}: W({step.t}) lacks a self-loop at gamma={gamma}")

                expected_now = step.cond_exp
                se = 0.0
                if expected_now is None:
                    expected_now, entry_se = path.estimate_conditional(step.state, step.t, resamples, mc_rng)
                    se = float(np.sqrt((entry_se ** 2).sum(axis=0)).max())
                    monte_carlo = True
                deviation = column_deviation(expected_now)
                if deviation > max_dev:
                    max_dev, dev_se = deviation, se
                if conditioning == 'step':
                    window_graphs.append(graph_of(expected_now, gamma))

            windows += 1
            if not has_spanning_rooted_tree(union_graphs(window_graphs)):
                connect_ok = False
                failures.append(f"trial {trial}: window ({window_start}, {window_start + B}] "
                                f"has no spanning rooted tree")

    if monte_carlo:
        logger.warning(f"{gen.kind} chain: conditional expectations were estimated by Monte Carlo")
    report = AssumptionReport(
        row_stochastic_ok=row_ok,
        self_loops_ok=loops_ok,
        cond_column_sums_max_dev=max_dev,
        cond_column_sums_se=dev_se,
        b_connectivity_ok=connect_ok,
        B_used=B,
        gamma_used=gamma,
        trials=trials,
        windows_checked=windows,
        conditioning=conditioning,
        monte_carlo=monte_carlo,
        seed=gen.seed,
        failures=failures,
    )
    logger.info(f"Assumption check for {gen.kind} chain: passed={report.passed} "
                f"({windows} windows, max column deviation {max_dev:.3e})")
    return report
