"""
Autonomous and controlled averaging dynamics along sampled chains

    x(t+1) = W(t+1) x(t)            (autonomous)
    x(t+1) = W(t+1) x(t) + u(t)     (controlled)
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Iterator, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from .chains import ChainGenerator, seed_label
from .errors import DimensionMismatch, IndexOutOfRange, MissingLogs
from .stochastic_core import StateBlock, StochasticMatrix, make_state, make_stochastic

logger = logging.getLogger(__name__)


class InputPolicy(Protocol):
    """Maps (t, x(t)) to the input u(t) with the same (n, m) shape"""

    def __call__(self, t: int, x: StateBlock): ...


@dataclass
class Trajectory:
    """
    One sample path of the dynamics

    values[k] is x(t0 + k); matrices[k] is W(t0 + k + 1); inputs[k] is u(t0 + k);
    chain_states[k] is the generator state W(t0 + k + 1) was drawn from.
    """

    t0: int
    values: np.ndarray
    diameters: np.ndarray
    matrices: Optional[List[StochasticMatrix]] = None
    inputs: Optional[np.ndarray] = None
    chain_states: List[Any] = field(default_factory=list)
    controlled: bool = False
    policy_name: str = 'none'
    metadata: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.values.shape[0] - 1

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @property
    def m(self) -> int:
        return self.values.shape[2]

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.t0, self.t0 + self.T + 1)

    @property
    def states(self) -> List[StateBlock]:
        return [StateBlock(v) for v in self.values]

    def _check_time(self, t: int, last: Optional[int] = None):
        last = self.t0 + self.T if last is None else last
        if not self.t0 <= t <= last:
            raise IndexOutOfRange(f"time {t} outside [{self.t0}, {last}]")

    def state(self, t: int) -> StateBlock:
        self._check_time(t)
        return StateBlock(self.values[t - self.t0])

    def matrix(self, t: int) -> StochasticMatrix:
        """The realized W(t)"""
        if self.matrices is None:
            raise MissingLogs("run did not log matrices (log_matrices=False)")
        self._check_time(t - 1, self.t0 + self.T - 1)
        return self.matrices[t - self.t0 - 1]

    def input(self, s: int) -> np.ndarray:
        """u(s); zero for autonomous runs"""
        self._check_time(s, self.t0 + self.T - 1)
        if self.inputs is None:
            if self.controlled:
                raise MissingLogs("controlled run did not log inputs")
            return np.zeros((self.n, self.m))
        return self.inputs[s - self.t0]

    def transition(self, tau: int, t: int) -> StochasticMatrix:
        if self.matrices is None:
            raise MissingLogs("run did not log matrices (log_matrices=False)")
        return transition_matrix(self.matrices, tau, t, first=self.t0 + 1)

    def input_diameters(self) -> np.ndarray:
        """d(u(s)) for s = t0..t0+T-1"""
        if self.inputs is None:
            return np.zeros(self.T)
        return np.ptp(self.inputs, axis=1).max(axis=1) if self.T else np.zeros(0)


def spread_state(n: int, m: int = 1) -> StateBlock:
    """x_i = i - (n+1)/2 in every coordinate (agents counted from 1)"""
    column = np.arange(1, n + 1, dtype=float) - (n + 1) / 2.0
    return make_state(np.repeat(column[:, None], m, axis=1))


def _as_input(u, n: int, m: int) -> np.ndarray:
    values = u.values if isinstance(u, StateBlock) else np.asarray(u, dtype=float)
    if values.shape != (n, m):
        raise DimensionMismatch(f"policy returned shape {values.shape}, expected {(n, m)}")
    return values


def run_controlled(gen: ChainGenerator, x0: StateBlock, policy: Optional[InputPolicy], T: int,
                   log_matrices: bool = False) -> Trajectory:
    """
    Iterate x(t+1) = W(t+1) x(t) + u(t) for T steps starting at the generator's time

    A policy of None runs the autonomous dynamics.
    """
    if gen.n != x0.n:
        raise DimensionMismatch(f"chain has n={gen.n}, initial state has n={x0.n}")
    if T < 0:
        raise ValueError(f"T must be nonnegative, got {T}")

    n, m = x0.n, x0.m
    values = np.empty((T + 1, n, m))
    values[0] = x0.values
    inputs = np.empty((T, n, m)) if policy is not None else None
    matrices = [] if log_matrices else None
    chain_states = []
    t0 = gen.t

    for k in range(T):
        x = values[k]
        step = gen.step()
        chain_states.append(step.state)
        if matrices is not None:
            matrices.append(step.W)
        nxt = step.W.entries @ x
        if inputs is not None:
            u = _as_input(policy(t0 + k, StateBlock(x)), n, m)
            inputs[k] = u
            nxt = nxt + u
        values[k + 1] = nxt

    if not np.all(np.isfinite(values)):
        raise FloatingPointError("trajectory diverged to non-finite values")
    diameters = np.ptp(values, axis=1).max(axis=1)
    name = getattr(policy, 'name', type(policy).__name__) if policy is not None else 'none'
    logger.debug(f"Ran {T} steps of {gen.kind} chain (policy={name}), final d(x)={diameters[-1]:.3e}")
    return Trajectory(
        t0=t0,
        values=values,
        diameters=diameters,
        matrices=matrices,
        inputs=inputs,
        chain_states=chain_states,
        controlled=policy is not None,
        policy_name=name,
        metadata={'chain': gen.describe(), 'seed': seed_label(gen.seed)},
    )


def run_autonomous(gen: ChainGenerator, x0: StateBlock, T: int, log_matrices: bool = False) -> Trajectory:
    return run_controlled(gen, x0, None, T, log_matrices)


def transition_matrix(Ws: Sequence[StochasticMatrix], tau: int, t: int, first: int = 1) -> StochasticMatrix:
    """
    Phi(t, tau) = W(t) ... W(tau+1), with Phi(tau, tau) = I

    Ws[k] holds W(first + k).
    """
    if tau > t:
        raise IndexOutOfRange(f"tau={tau} > t={t}")
    if t > tau and (tau + 1 < first or t > first + len(Ws) - 1):
        raise IndexOutOfRange(f"matrices cover [{first}, {first + len(Ws) - 1}], need [{tau + 1}, {t}]")
    if t == tau:
        n = Ws[0].n if Ws else 1
        return make_stochastic(np.eye(n))
    phi = Ws[tau + 1 - first].entries
    for s in range(tau + 2, t + 1):
        phi = Ws[s - first].entries @ phi
    return make_stochastic(phi)


def backward_products(traj: Trajectory, tau: int, t: int) -> Iterator[Tuple[int, np.ndarray]]:
    """Yield (s, Phi(t, s)) for s = t, t-1, ..., tau"""
    if traj.matrices is None:
        raise MissingLogs("run did not log matrices (log_matrices=False)")
    if tau > t:
        raise IndexOutOfRange(f"tau={tau} > t={t}")
    traj._check_time(tau)
    traj._check_time(t)
    phi = np.eye(traj.n)
    yield t, phi
    for s in range(t - 1, tau - 1, -1):
        phi = phi @ traj.matrices[s - traj.t0].entries
        yield s, phi


def variation_of_constants_check(traj: Trajectory, tau: int, t: int) -> float:
    """
    Max-entry gap between the logged x(t) and
    Phi(t, tau) x(tau) + sum_{s=tau}^{t-1} Phi(t, s+1) u(s)
    """
    rhs = np.zeros((traj.n, traj.m))
    for s, phi in backward_products(traj, tau, t):
        if s == tau:
            rhs = rhs + phi @ traj.values[tau - traj.t0]
        else:
            rhs = rhs + phi @ traj.input(s - 1)
    return float(np.max(np.abs(traj.values[t - traj.t0] - rhs)))


def trajectory_rows(traj: Trajectory) -> Iterator[Tuple[int, int, int, float]]:
    """Rows `t, agent, coord, value` of the long-format export"""
    for k, t in enumerate(traj.times):
        for i in range(traj.n):
            for c in range(traj.m):
                yield int(t), i, c, float(traj.values[k, i, c])


def summary_rows(traj: Trajectory, alphas: Optional[np.ndarray] = None) -> Iterator[Tuple[int, float, float]]:
    """Rows `t, d_x, alpha`; alpha is 0 for autonomous runs"""
    for k, t in enumerate(traj.times):
        alpha = float(alphas[k]) if alphas is not None else 0.0
        yield int(t), float(traj.diameters[k]), alpha
