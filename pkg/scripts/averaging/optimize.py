"""
Distributed subgradient optimization over random averaging chains

    x(t+1) = W(t+1) x(t) - alpha(t) g(t),   g_i(t) a subgradient of f_i at x_i(t)

Objectives have bounded subgradients (l-infinity bound L_i), step sizes follow
alpha(t) = K t^-beta with beta in (1/2, 1].
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .chains import ChainGenerator, seed_sequence
from .dynamics import Trajectory, run_controlled
from .errors import (
    BetaOutOfRange,
    ConditionalLawUnavailable,
    DeltaNonpositive,
    DimensionMismatch,
    EmptyPieces,
    IndexOutOfRange,
    KNonpositive,
    MissingLogs,
    NonFiniteEntry,
    OptimizerOnBoundary,
    UnboundedSubgradient,
)
from .stochastic_core import StateBlock

logger = logging.getLogger(__name__)

# Slack allowed in the deterministic per-step inequality
AUDIT_TOL = 1e-9
WITNESS_TOL = 1e-9


class Objective(ABC):
    """Convex f: R^m -> R with a deterministic subgradient selector bounded by L in l-infinity"""

    name = 'objective'
    separable = False

    def __init__(self, m: int):
        self.m = m

    @abstractmethod
    def value(self, z: np.ndarray) -> float:
        ...

    @abstractmethod
    def subgradient(self, z: np.ndarray) -> np.ndarray:
        ...

    @property
    @abstractmethod
    def L(self) -> float:
        ...

    def values(self, Z: np.ndarray) -> np.ndarray:
        """f evaluated on each row of Z"""
        return np.array([self.value(z) for z in Z])

    def anchor(self) -> Optional[np.ndarray]:
        return None

    def to_dict(self) -> dict:
        return {'type': self.name}


class AbsDeviation(Objective):
    """f(z) = sum_k |z_k - a_k|, subgradient sign(z - a) with 0 at kinks"""

    name = 'abs'
    separable = True

    def __init__(self, a):
        self.a = np.atleast_1d(np.asarray(a, dtype=float))
        if not np.all(np.isfinite(self.a)):
            raise NonFiniteEntry("anchor must be finite")
        super().__init__(self.a.shape[0])

    def value(self, z):
        return float(np.abs(np.asarray(z, dtype=float) - self.a).sum())

    def values(self, Z):
        return np.abs(np.asarray(Z, dtype=float) - self.a).sum(axis=1)

    def subgradient(self, z):
        return np.sign(np.asarray(z, dtype=float) - self.a)

    @property
    def L(self):
        return 1.0

    def anchor(self):
        return self.a

    def to_dict(self):
        return {'type': self.name, 'a': self.a.tolist()}


class Huber(Objective):
    """Coordinate-wise Huber loss around a; quadratic within delta, linear outside"""

    name = 'huber'
    separable = True

    def __init__(self, a, delta: float):
        if not delta > 0:
            raise DeltaNonpositive(f"delta must be positive, got {delta}")
        self.a = np.atleast_1d(np.asarray(a, dtype=float))
        if not np.all(np.isfinite(self.a)):
            raise NonFiniteEntry("anchor must be finite")
        if not np.isfinite(delta):
            raise UnboundedSubgradient(f"delta must be finite, got {delta}")
        self.delta = float(delta)
        super().__init__(self.a.shape[0])

    def _loss(self, r: np.ndarray) -> np.ndarray:
        d = self.delta
        return np.where(np.abs(r) <= d, 0.5 * r * r, d * (np.abs(r) - 0.5 * d))

    def value(self, z):
        return float(self._loss(np.asarray(z, dtype=float) - self.a).sum())

    def values(self, Z):
        return self._loss(np.asarray(Z, dtype=float) - self.a).sum(axis=1)

    def subgradient(self, z):
        return np.clip(np.asarray(z, dtype=float) - self.a, -self.delta, self.delta)

    @property
    def L(self):
        return self.delta

    def anchor(self):
        return self.a

    def to_dict(self):
        return {'type': self.name, 'a': self.a.tolist(), 'delta': self.delta}


class MaxAffine(Objective):
    """f(z) = max_k <s_k, z> + b_k; ties resolve to the lowest piece index"""

    name = 'max_affine'

    def __init__(self, slopes, offsets):
        slopes = np.asarray(slopes, dtype=float)
        offsets = np.asarray(offsets, dtype=float).reshape(-1)
        if slopes.size == 0 or offsets.size == 0:
            raise EmptyPieces("max_affine needs at least one piece")
        if slopes.ndim == 1:
            slopes = slopes.reshape(-1, 1)
        if slopes.shape[0] != offsets.shape[0]:
            raise EmptyPieces(f"{slopes.shape[0]} slopes but {offsets.shape[0]} offsets")
        if not np.all(np.isfinite(slopes)):
            raise UnboundedSubgradient("max_affine slopes must be finite")
        if not np.all(np.isfinite(offsets)):
            raise NonFiniteEntry("max_affine offsets must be finite")
        self.slopes = slopes
        self.offsets = offsets
        super().__init__(slopes.shape[1])

    def value(self, z):
        return float(np.max(self.slopes @ np.asarray(z, dtype=float) + self.offsets))

    def values(self, Z):
        return (np.asarray(Z, dtype=float) @ self.slopes.T + self.offsets).max(axis=1)

    def subgradient(self, z):
        # argmax returns the first maximizer
        return self.slopes[int(np.argmax(self.slopes @ np.asarray(z, dtype=float) + self.offsets))].copy()

    @property
    def L(self):
        return float(np.abs(self.slopes).max())

    def to_dict(self):
        return {'type': self.name, 'slopes': self.slopes.tolist(), 'offsets': self.offsets.tolist()}


def abs_deviation(a) -> AbsDeviation:
    return AbsDeviation(a)


def huber(a, delta: float) -> Huber:
    return Huber(a, delta)


def max_affine(slopes, offsets) -> MaxAffine:
    return MaxAffine(slopes, offsets)


def total_value(objectives: Sequence[Objective], Z: np.ndarray) -> np.ndarray:
    """F(z) = sum_i f_i(z) on each row of Z"""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    return np.sum([obj.values(Z) for obj in objectives], axis=0)


def total_bound(objectives: Sequence[Objective]) -> float:
    return float(sum(obj.L for obj in objectives))


@dataclass
class ObjectiveCheck:
    convexity_violation: float
    subgradient_violation: float
    max_subgradient: float
    bound: float

    @property
    def passed(self) -> bool:
        return (self.convexity_violation <= WITNESS_TOL
                and self.subgradient_violation <= WITNESS_TOL
                and self.max_subgradient <= self.bound + WITNESS_TOL)


def validate_objective(obj: Objective, rng: Optional[np.random.Generator] = None,
                       samples: int = 200, scale: float = 10.0) -> ObjectiveCheck:
    """
    Sample convexity, subgradient inequality and the l-infinity bound

    Raises UnboundedSubgradient when a sampled subgradient exceeds L.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    center = obj.anchor() if obj.anchor() is not None else np.zeros(obj.m)
    X = center + rng.uniform(-scale, scale, size=(samples, obj.m))
    Y = center + rng.uniform(-scale, scale, size=(samples, obj.m))
    theta = rng.uniform(0.0, 1.0, size=(samples, 1))

    fx, fy = obj.values(X), obj.values(Y)
    mix = obj.values(theta * X + (1 - theta) * Y)
    convexity = float(np.max(mix - (theta[:, 0] * fx + (1 - theta[:, 0]) * fy)))

    G = np.stack([obj.subgradient(y) for y in Y])
    subgrad = float(np.max(np.einsum('ij,ij->i', G, X - Y) - (fx - fy)))
    largest = float(np.abs(G).max())

    check = ObjectiveCheck(max(convexity, 0.0), max(subgrad, 0.0), largest, obj.L)
    if largest > obj.L + WITNESS_TOL:
        raise UnboundedSubgradient(f"{obj.name}: sampled subgradient {largest:.3g} exceeds L={obj.L:.3g}")
    if not check.passed:
        logger.warning(f"{obj.name} objective failed its convexity witness: {check}")
    return check


@dataclass(frozen=True)
class StepSchedule:
    """alpha(t) = K t^-beta"""

    K: float
    beta: float
    t0: int = 1

    def __call__(self, t: int) -> float:
        if t < 1:
            raise IndexOutOfRange(f"step size undefined at t={t}")
        return self.K * float(t) ** (-self.beta)

    def series(self, times: np.ndarray) -> np.ndarray:
        return self.K * np.asarray(times, dtype=float) ** (-self.beta)

    def to_dict(self) -> dict:
        return {'K': self.K, 'beta': self.beta, 't0': self.t0}


def make_schedule(K: float, beta: float, t0: int = 1) -> StepSchedule:
    if not K > 0:
        raise KNonpositive(f"K must be positive, got {K}")
    if not 0.5 < beta <= 1.0:
        raise BetaOutOfRange(f"beta must lie in (1/2, 1], got {beta}")
    if t0 < 1:
        raise IndexOutOfRange(f"t0 must be at least 1, got {t0}")
    return StepSchedule(float(K), float(beta), int(t0))


class GradientPolicy:
    """u(t) = -alpha(t) g(t), g_i(t) the selected subgradient of f_i at x_i(t)"""

    name = 'subgradient'

    def __init__(self, objectives: Sequence[Objective], schedule: StepSchedule):
        self.objectives = list(objectives)
        self.schedule = schedule
        kinds = {type(obj) for obj in self.objectives}
        self._anchors = None
        self._deltas = None
        if kinds == {AbsDeviation}:
            self._anchors = np.stack([obj.a for obj in self.objectives])
        elif kinds == {Huber}:
            self._anchors = np.stack([obj.a for obj in self.objectives])
            self._deltas = np.array([[obj.delta] for obj in self.objectives])

    def subgradients(self, X: np.ndarray) -> np.ndarray:
        """Row i is the selected subgradient of f_i at X[i]"""
        if self._anchors is not None:
            if self._deltas is None:
                return np.sign(X - self._anchors)
            return np.clip(X - self._anchors, -self._deltas, self._deltas)
        return np.stack([obj.subgradient(x) for obj, x in zip(self.objectives, X)])

    def __call__(self, t: int, x: StateBlock) -> np.ndarray:
        return -self.schedule(t) * self.subgradients(x.values)


@dataclass
class OptimalSet:
    """
    Minimizers of F

    Box-shaped sets come from medians and bisection; grid searches also keep
    the near-optimal grid points, and distance is measured to those.
    """

    lower: np.ndarray
    upper: np.ndarray
    points: Optional[np.ndarray] = None

    @property
    def is_singleton(self) -> bool:
        return bool(np.allclose(self.lower, self.upper, atol=1e-9))

    def distance(self, Z: np.ndarray) -> np.ndarray:
        """l-infinity distance from each row of Z to the set"""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        if self.points is None or Z.shape[1] == 1:
            gap = np.maximum(np.maximum(self.lower - Z, Z - self.upper), 0.0)
            return gap.max(axis=1)
        out = np.empty(Z.shape[0])
        for start in range(0, Z.shape[0], 4096):
            chunk = Z[start:start + 4096]
            out[start:start + 4096] = np.abs(chunk[:, None, :] - self.points[None, :, :]).max(axis=2).min(axis=1)
        return out

    def to_dict(self) -> dict:
        return {'lower': self.lower.tolist(), 'upper': self.upper.tolist(),
                'grid_points': 0 if self.points is None else int(self.points.shape[0])}


@dataclass
class OracleResult:
    F_star: float
    optimal_set: OptimalSet
    error_bound: float
    method: str

    def to_dict(self) -> dict:
        return {'F_star': self.F_star, 'optimal_set': self.optimal_set.to_dict(),
                'error_bound': self.error_bound, 'method': self.method}


def _default_box(objectives: Sequence[Objective], m: int) -> Tuple[np.ndarray, np.ndarray]:
    anchors = [obj.anchor() for obj in objectives]
    if all(a is not None for a in anchors):
        stacked = np.stack(anchors)
        return stacked.min(axis=0) - 1.0, stacked.max(axis=0) + 1.0
    return np.full(m, -10.0), np.full(m, 10.0)


def _median_set(objectives: Sequence[AbsDeviation]) -> OracleResult:
    anchors = np.sort(np.stack([obj.a for obj in objectives]), axis=0)
    n = anchors.shape[0]
    lower, upper = anchors[(n - 1) // 2], anchors[n // 2]
    F_star = float(total_value(objectives, lower)[0])
    return OracleResult(F_star, OptimalSet(lower.copy(), upper.copy()), 0.0, 'median')


def _bisect(h, lo: float, hi: float, strict: bool, tol: float) -> float:
    # strict=True: invariant h(lo) < 0 <= h(hi); otherwise h(lo) <= 0 < h(hi)
    for _ in range(200):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        negative = h(mid) < 0 if strict else h(mid) <= 0
        if negative:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _separable_set(objectives: Sequence[Objective], box_lo: np.ndarray, box_hi: np.ndarray) -> OracleResult:
    m = objectives[0].m
    lower, upper = np.empty(m), np.empty(m)
    tol = 1e-12 * max(1.0, float(np.abs(np.concatenate([box_lo, box_hi])).max()))
    for k in range(m):
        def h(z, k=k):
            point = np.full(m, z)
            return sum(obj.subgradient(point)[k] for obj in objectives)

        lo, hi = float(box_lo[k]), float(box_hi[k])
        if not h(lo) < 0 or not h(hi) > 0:
            raise OptimizerOnBoundary(f"coordinate {k}: minimizer not inside [{lo}, {hi}]")
        lower[k] = _bisect(h, lo, hi, True, tol)
        upper[k] = _bisect(h, lo, hi, False, tol)
    upper = np.maximum(upper, lower)
    F_star = float(total_value(objectives, lower)[0])
    width = float((upper - lower).max()) + tol
    error = total_bound(objectives) * m * tol
    logger.debug(f"Bisection oracle: width {width:.3e}, F*={F_star:.12g}")
    return OracleResult(F_star, OptimalSet(lower, upper), error, 'bisection')


def _grid_set(objectives: Sequence[Objective], box_lo: np.ndarray, box_hi: np.ndarray,
              grid: Optional[int]) -> OracleResult:
    m = objectives[0].m
    if m > 2:
        raise ValueError(f"grid oracle supports m <= 2, got m={m}")
    grid = grid if grid is not None else (4001 if m == 1 else 401)
    axes = [np.linspace(box_lo[k], box_hi[k], grid) for k in range(m)]
    mesh = np.stack(np.meshgrid(*axes, indexing='ij'), axis=-1).reshape(-1, m)
    F = total_value(objectives, mesh)
    best = int(np.argmin(F))
    on_edge = np.isclose(mesh[best], box_lo) | np.isclose(mesh[best], box_hi)
    if np.any(on_edge):
        raise OptimizerOnBoundary(f"grid minimum {mesh[best].tolist()} lies on the box boundary")
    h = max(float(ax[1] - ax[0]) for ax in axes)
    error = total_bound(objectives) * m * h
    near = mesh[F <= F[best] + error]
    optimal = OptimalSet(near.min(axis=0), near.max(axis=0), near)
    return OracleResult(float(F[best]), optimal, error, 'grid')


def optimal_oracle(objectives: Sequence[Objective], box: Optional[Tuple[Sequence[float], Sequence[float]]] = None,
                   grid: Optional[int] = None) -> OracleResult:
    """
    F* = min sum_i f_i and a description of the optimal set

    Sums of absolute deviations are solved by coordinate-wise medians,
    other separable sums by bisection on the subgradient sign, and anything
    else by a grid search over `box` (m <= 2).
    """
    objectives = list(objectives)
    if not objectives:
        raise ValueError("no objectives")
    m = objectives[0].m
    if any(obj.m != m for obj in objectives):
        raise DimensionMismatch("objectives disagree on the dimension m")
    if box is None:
        box_lo, box_hi = _default_box(objectives, m)
    else:
        box_lo = np.broadcast_to(np.asarray(box[0], dtype=float), (m,)).copy()
        box_hi = np.broadcast_to(np.asarray(box[1], dtype=float), (m,)).copy()

    if all(type(obj) is AbsDeviation for obj in objectives):
        result = _median_set(objectives)
    elif all(obj.separable for obj in objectives):
        result = _separable_set(objectives, box_lo, box_hi)
    else:
        result = _grid_set(objectives, box_lo, box_hi, grid)
    logger.info(f"Optimal value F*={result.F_star:.12g} via {result.method}")
    return result


@dataclass
class OptRun:
    """One solver sample path plus the averaged iterate and optimality gaps"""

    trajectory: Trajectory
    xbar: np.ndarray
    f_values: np.ndarray
    alphas: np.ndarray
    objectives: List[Objective]
    schedule: StepSchedule
    chain: ChainGenerator
    oracle: Optional[OracleResult] = None
    metadata: dict = field(default_factory=dict)

    @property
    def F_star(self) -> Optional[float]:
        return None if self.oracle is None else self.oracle.F_star

    @property
    def f_gap(self) -> Optional[np.ndarray]:
        return None if self.oracle is None else self.f_values - self.oracle.F_star

    @property
    def dist_to_opt(self) -> Optional[np.ndarray]:
        """max_i distance of x_i(t) to the optimal set"""
        if self.oracle is None:
            return None
        traj = self.trajectory
        flat = traj.values.reshape(-1, traj.m)
        return self.oracle.optimal_set.distance(flat).reshape(traj.T + 1, traj.n).max(axis=1)

    def final_error(self) -> float:
        if self.oracle is None:
            raise MissingLogs("run has no oracle to measure against")
        return float(self.oracle.optimal_set.distance(self.trajectory.values[-1]).max())

    def summary(self) -> dict:
        out = {
            'T': self.trajectory.T,
            'final_d_x': float(self.trajectory.diameters[-1]),
            'final_xbar': self.xbar[-1].tolist(),
        }
        if self.oracle is not None:
            out['final_f_gap'] = float(self.f_gap[-1])
            out['final_dist_to_opt'] = self.final_error()
        return out


def solve_distributed(gen: ChainGenerator, objectives: Sequence[Objective], sched: StepSchedule,
                      x0: StateBlock, T: int, oracle: Optional[OracleResult] = None,
                      log_matrices: bool = False) -> OptRun:
    """Run x(t+1) = W(t+1) x(t) - alpha(t) g(t) for T steps"""
    objectives = list(objectives)
    if len(objectives) != gen.n:
        raise DimensionMismatch(f"{len(objectives)} objectives for {gen.n} agents")
    for i, obj in enumerate(objectives):
        if obj.m != x0.m:
            raise DimensionMismatch(f"objective {i} has m={obj.m}, state has m={x0.m}")

    policy = GradientPolicy(objectives, sched)
    traj = run_controlled(gen, x0, policy, T, log_matrices=log_matrices)
    xbar = traj.values.mean(axis=1)
    run = OptRun(
        trajectory=traj,
        xbar=xbar,
        f_values=total_value(objectives, xbar),
        alphas=sched.series(traj.times),
        objectives=objectives,
        schedule=sched,
        chain=gen,
        oracle=oracle,
        metadata={**traj.metadata, 'schedule': sched.to_dict(),
                  'objectives': [obj.to_dict() for obj in objectives]},
    )
    if oracle is not None:
        logger.debug(f"Solver run finished: f_gap={run.f_gap[-1]:.3e}, d(x)={traj.diameters[-1]:.3e}")
    return run


def optrun_rows(run: OptRun):
    """Rows `t, d_x, f_gap, alpha, dist_to_opt`; gaps are NaN without an oracle"""
    traj = run.trajectory
    nan = np.full(traj.T + 1, np.nan)
    gap = run.f_gap if run.oracle is not None else nan
    dist = run.dist_to_opt if run.oracle is not None else nan
    for k, t in enumerate(traj.times):
        yield int(t), float(traj.diameters[k]), float(gap[k]), float(run.alphas[k]), float(dist[k])


@dataclass
class LyapunovReport:
    """
    Per-step audit of the averaged iterate

    Part (i) is the deterministic lower bound on n<gbar, xbar - v>, part (ii)
    the one-step conditional drift bound on |xbar(t+1) - v|^2 checked by
    resampling W(t+1).
    """

    v: List[float]
    steps_checked: int
    max_violation: float
    violations: int
    drift_steps: int = 0
    drift_violations: int = 0
    max_drift_z: float = float('-inf')
    resamples: int = 0

    @property
    def passed(self) -> bool:
        return self.violations == 0 and self.drift_violations == 0

    def to_dict(self) -> dict:
        return {
            'v': self.v,
            'steps_checked': self.steps_checked,
            'max_violation': self.max_violation,
            'violations': self.violations,
            'drift_steps': self.drift_steps,
            'drift_violations': self.drift_violations,
            'max_drift_z': self.max_drift_z if self.drift_steps else None,
            'resamples': self.resamples,
            'passed': self.passed,
        }


def _spread_terms(X: np.ndarray, xbar: np.ndarray) -> np.ndarray:
    """|x_i - xbar|_inf for every agent"""
    return np.abs(X - xbar).max(axis=1)


def lyapunov_audit(run: OptRun, v, resamples: int = 0, steps: Optional[Sequence[int]] = None,
                   drift_steps: int = 200, seed=None) -> LyapunovReport:
    """
    Check the averaged-iterate inequalities at logged steps

    (i)  n<gbar, xbar - v> >= F(xbar) - F(v) - 2 m sum_i L_i |x_i - xbar|_inf
         (the dual l1 norm of an l-infinity-bounded subgradient is at most m L_i;
         m = 1 gives the scalar inequality exactly)
    (ii) E[|xbar(t+1) - v|^2 | F(t)] <= |xbar - v|^2 + alpha^2 m L^2/n^2
         + sum_i |x_i - xbar|^2 - (2 alpha/n)(F(xbar) - F(v))
         + (4 alpha/n) sum_i sqrt(m) L_i |x_i - xbar|
         in the Euclidean norm, estimated from `resamples` fresh draws of W(t+1)
    """
    traj = run.trajectory
    n, m = traj.n, traj.m
    v = np.broadcast_to(np.asarray(v, dtype=float), (m,)).copy()
    objectives = run.objectives
    L_i = np.array([obj.L for obj in objectives])
    L = float(L_i.sum())
    policy = GradientPolicy(objectives, run.schedule)
    F_v = float(total_value(objectives, v)[0])

    ks = range(traj.T + 1) if steps is None else [t - traj.t0 for t in steps]
    worst = float('-inf')
    bad = 0
    checked = 0
    for k in ks:
        if not 0 <= k <= traj.T:
            raise IndexOutOfRange(f"step {k + traj.t0} outside the run")
        X = traj.values[k]
        xbar = run.xbar[k]
        g_sum = policy.subgradients(X).sum(axis=0)
        lhs = float(g_sum @ (xbar - v))
        rhs = float(run.f_values[k]) - F_v - 2.0 * m * float(L_i @ _spread_terms(X, xbar))
        gap = rhs - lhs
        worst = max(worst, gap)
        if gap > AUDIT_TOL:
            bad += 1
        checked += 1

    report = LyapunovReport(v=v.tolist(), steps_checked=checked, max_violation=worst, violations=bad,
                            resamples=resamples)
    if resamples <= 0 or traj.T == 0:
        return report
    if not run.chain.supports_resampling:
        raise ConditionalLawUnavailable(f"{run.chain.kind} chain cannot resample W(t+1)")
    if len(traj.chain_states) != traj.T:
        raise MissingLogs("run did not log chain states")

    rng = np.random.default_rng(seed_sequence(seed if seed is not None else 0))
    picks = np.unique(np.linspace(0, traj.T - 1, min(drift_steps, traj.T)).astype(int))
    for k in picks:
        t = traj.t0 + int(k)
        X = traj.values[k]
        xbar = run.xbar[k]
        alpha = run.schedule(t)
        gbar = policy.subgradients(X).mean(axis=0)
        samples = np.empty(resamples)
        for r in range(resamples):
            W = run.chain.resample(traj.chain_states[k], t + 1, rng).entries
            nxt = (W @ X).mean(axis=0) - alpha * gbar
            samples[r] = float(np.sum((nxt - v) ** 2))
        estimate = samples.mean()
        se = samples.std(ddof=1) / np.sqrt(resamples) if resamples > 1 else 0.0

        spread2 = np.sqrt(np.sum((X - xbar) ** 2, axis=1))
        bound = (float(np.sum((xbar - v) ** 2)) + alpha ** 2 * m * L ** 2 / n ** 2
                 + float(np.sum(spread2 ** 2))
                 - 2.0 * alpha / n * (float(run.f_values[k]) - F_v)
                 + 4.0 * alpha / n * np.sqrt(m) * float(L_i @ spread2))
        excess = estimate - bound
        z = excess / se if se > 0 else (0.0 if excess <= AUDIT_TOL else float('inf'))
        report.max_drift_z = max(report.max_drift_z, z)
        if excess > 3.0 * se + AUDIT_TOL:
            report.drift_violations += 1
        report.drift_steps += 1
    logger.info(f"Lyapunov audit at v={v.tolist()}: {report.violations} deterministic and "
                f"{report.drift_violations} drift violations")
    return report


@dataclass
class MeanDynamicsReport:
    residual: float
    gbar_ratio: float
    scale: float = 1.0

    @property
    def passed(self) -> bool:
        return self.residual <= 1e-12 * max(1.0, self.scale) and self.gbar_ratio <= 1.0 + 1e-12

    def to_dict(self) -> dict:
        return {'residual': self.residual, 'gbar_ratio': self.gbar_ratio, 'passed': self.passed}


def mean_dynamics_check(run: OptRun) -> MeanDynamicsReport:
    """
    Recompute xbar(t+1) = (1/n) e^T W(t+1) x(t) - alpha(t) gbar(t) from logs and
    report the worst residual together with max_t n^2 |gbar(t)|_inf^2 / L^2
    """
    traj = run.trajectory
    if traj.matrices is None:
        raise MissingLogs("mean dynamics check needs logged matrices")
    policy = GradientPolicy(run.objectives, run.schedule)
    L = total_bound(run.objectives)
    residual = 0.0
    ratio = 0.0
    for k in range(traj.T):
        t = traj.t0 + k
        X = traj.values[k]
        gbar = policy.subgradients(X).mean(axis=0)
        predicted = traj.matrices[k].entries.mean(axis=0) @ X - run.schedule(t) * gbar
        residual = max(residual, float(np.abs(predicted - run.xbar[k + 1]).max()))
        if L > 0:
            ratio = max(ratio, traj.n ** 2 * float(np.abs(gbar).max()) ** 2 / L ** 2)
    scale = float(np.abs(traj.values).max()) if traj.values.size else 1.0
    return MeanDynamicsReport(residual=residual, gbar_ratio=ratio, scale=scale)


@dataclass
class SummabilityReport:
    """Tail increments are reported relative to the full partial sum"""

    tail_weighted: float
    tail_squared: float
    total_weighted: float
    total_squared: float
    tol: float

    @staticmethod
    def _fraction(tail: float, total: float) -> float:
        return tail / total if total > 0 else 0.0

    @property
    def weighted_fraction(self) -> float:
        return self._fraction(self.tail_weighted, self.total_weighted)

    @property
    def squared_fraction(self) -> float:
        return self._fraction(self.tail_squared, self.total_squared)

    @property
    def passed(self) -> bool:
        return self.weighted_fraction <= self.tol and self.squared_fraction <= self.tol

    def to_dict(self) -> dict:
        return {'tail_weighted': self.tail_weighted, 'tail_squared': self.tail_squared,
                'total_weighted': self.total_weighted, 'total_squared': self.total_squared,
                'weighted_fraction': self.weighted_fraction, 'squared_fraction': self.squared_fraction,
                'tol': self.tol, 'passed': self.passed}


def summability_check(run: OptRun, tol: float = 0.05) -> SummabilityReport:
    """
    Tail increments over [T/2, T] of sum_t alpha(t) max_i|x_i - xbar| and
    sum_t max_i |x_i - xbar|^2

    Passes when each tail is at most `tol` times its series total.
    """
    traj = run.trajectory
    spread = np.abs(traj.values - run.xbar[:, None, :]).max(axis=(1, 2))
    weighted = np.cumsum(run.alphas * spread)
    squared = np.cumsum(spread ** 2)
    half = traj.T // 2
    return SummabilityReport(
        tail_weighted=float(weighted[-1] - weighted[half]),
        tail_squared=float(squared[-1] - squared[half]),
        total_weighted=float(weighted[-1]),
        total_squared=float(squared[-1]),
        tol=tol,
    )
