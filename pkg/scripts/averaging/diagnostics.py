"""
Monte Carlo estimators and audits for random averaging chains

Contraction-rate fitting, conditional column-sum checks, consensus-rate and
stopping-time statistics, the deterministic geometric sum bound, and the
mixing-coefficient floor. Every stochastic estimate carries a standard error
and is judged with a 3 SE band.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import linregress

from .chains import ChainGenerator, seed_sequence, trial_seeds
from .dynamics import Trajectory, backward_products
from .errors import (
    AllPathsDegenerate,
    ConditionalLawUnavailable,
    MissingLogs,
    NoCrossings,
    ThetaOutOfRange,
    TooFewRuns,
    TooShort,
    WindowOrderViolation,
)
from .stochastic_core import EXACT_TOL, StochasticMatrix, column_deviation, diam, mixing

logger = logging.getLogger(__name__)

# Decay fit ignores lags before this and means below the float floor
FIT_MIN_LAG = 5
FIT_FLOOR = 1e-12
MIN_DECAY_TRIALS = 30
MIN_DECAY_HORIZON = 10
MIN_RATE_SERIES = 100
MIN_MOMENT_RUNS = 30

GenFactory = Callable[[object], ChainGenerator]


def default_workers() -> int:
    return max(1, int(os.environ.get('AVERAGING_WORKERS', '4')))


def run_parallel(job: Callable, items: Sequence, workers: Optional[int] = None) -> list:
    """
    Apply `job` to every item on a thread pool; results keep the input order

    A failing item is logged and its exception re-raised once the pool drains.
    """
    items = list(items)
    results = [None] * len(items)
    errors = []
    with ThreadPoolExecutor(max_workers=workers or default_workers()) as executor:
        futures = {executor.submit(job, item): k for k, item in enumerate(items)}
        for future in as_completed(futures):
            k = futures[future]
            try:
                results[k] = future.result()
            except Exception as e:
                logger.error(f"Trial {k} failed: {e}")
                errors.append((k, e))
    if errors:
        raise min(errors, key=lambda pair: pair[0])[1]
    return results


def _mean_se(samples: np.ndarray, axis: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    count = samples.shape[axis]
    mean = samples.mean(axis=axis)
    if count < 2:
        return mean, np.zeros_like(mean)
    return mean, samples.std(axis=axis, ddof=1) / np.sqrt(count)


def series_rows(values: Sequence[float], se: Optional[Sequence[float]] = None, t_start: int = 1):
    """Rows `t, value, se` of a series export"""
    for k, value in enumerate(values):
        yield t_start + k, float(value), float(se[k]) if se is not None else 0.0


@dataclass
class DecayEstimate:
    """
    Mean diam(Phi(t0 + k, t0)) over independent paths for k = 1..horizon,
    with a log-linear fit mean ~ C lambda^k
    """

    horizon: int
    trials: int
    t0: int
    mean_diam: np.ndarray
    se: np.ndarray
    fitted_log_slope: float
    fitted_lambda: float
    r_squared: float
    intercept: float
    C_envelope: float
    fit_range: Tuple[int, int]

    def envelope(self, lag) -> np.ndarray:
        return self.C_envelope * self.fitted_lambda ** np.asarray(lag, dtype=float)

    def to_dict(self) -> dict:
        return {
            'horizon': self.horizon,
            'trials': self.trials,
            't0': self.t0,
            'fitted_log_slope': self.fitted_log_slope,
            'fitted_lambda': self.fitted_lambda,
            'r_squared': self.r_squared,
            'intercept': self.intercept,
            'C_envelope': self.C_envelope,
            'fit_range': list(self.fit_range),
            'final_mean_diam': float(self.mean_diam[-1]),
        }

    def rows(self):
        return series_rows(self.mean_diam, self.se, t_start=self.t0 + 1)


def _product_diameters(gen: ChainGenerator, steps: int) -> np.ndarray:
    phi = np.eye(gen.n)
    out = np.empty(steps)
    for k in range(steps):
        phi = gen.step().W.entries @ phi
        out[k] = diam(StochasticMatrix(phi))
    return out


def estimate_diam_decay(gen_factory: GenFactory, t_max: int, trials: int, seed=0,
                        workers: Optional[int] = None) -> DecayEstimate:
    """Fit log E[diam(Phi(t, t0))] against t - t0 by least squares"""
    if trials < MIN_DECAY_TRIALS:
        raise ValueError(f"need at least {MIN_DECAY_TRIALS} trials, got {trials}")
    if t_max < MIN_DECAY_HORIZON:
        raise ValueError(f"need t_max >= {MIN_DECAY_HORIZON}, got {t_max}")

    def one_path(child):
        return _product_diameters(gen_factory(child), t_max)

    seeds = trial_seeds(seed, trials)
    t0 = gen_factory(seeds[0]).t0
    paths = np.stack(run_parallel(one_path, seeds, workers))
    mean, se = _mean_se(paths)

    if np.all(mean <= FIT_FLOOR) or np.all(mean >= 1.0 - EXACT_TOL):
        raise AllPathsDegenerate("mean diameter is identically 0 or 1")
    lags = np.arange(1, t_max + 1)
    mask = (mean > FIT_FLOOR) & (lags >= FIT_MIN_LAG)
    if mask.sum() < 3:
        raise AllPathsDegenerate(f"only {int(mask.sum())} lags above the fit floor")

    fit = linregress(lags[mask], np.log(mean[mask]))
    lam = float(np.exp(fit.slope))
    # lag 0 has diam(I) = 1, so C >= 1
    positive = mean > 0
    C = float(np.exp(max(0.0, np.max(np.log(mean[positive]) - lags[positive] * fit.slope))))
    fitted = np.flatnonzero(mask)
    estimate = DecayEstimate(
        horizon=t_max,
        trials=trials,
        t0=t0,
        mean_diam=mean,
        se=se,
        fitted_log_slope=float(fit.slope),
        fitted_lambda=lam,
        r_squared=float(fit.rvalue ** 2),
        intercept=float(fit.intercept),
        C_envelope=C,
        fit_range=(int(lags[fitted[0]]), int(lags[fitted[-1]])),
    )
    logger.info(f"Decay fit over {trials} paths: lambda={lam:.6f}, R^2={estimate.r_squared:.4f}, C={C:.3g}")
    return estimate


@dataclass
class JointEstimate:
    windows: Tuple[Tuple[int, int], Tuple[int, int]]
    mean: float
    se: float
    trials: int

    def to_dict(self) -> dict:
        return {'windows': [list(w) for w in self.windows], 'mean': self.mean, 'se': self.se,
                'trials': self.trials}


def joint_diam_decay(gen_factory: GenFactory, windows, trials: int, seed=0,
                     workers: Optional[int] = None) -> JointEstimate:
    """Monte Carlo E[diam(Phi(t2, tau2)) diam(Phi(t1, tau1))] from the chain start"""
    (tau1, t1), (tau2, t2) = windows
    seeds = trial_seeds(seed, trials)
    t0 = gen_factory(seeds[0]).t0
    if not (t0 <= tau1 <= t1 and t0 <= tau2 <= t2 and tau1 <= tau2):
        raise WindowOrderViolation(f"windows ({tau1}, {t1}), ({tau2}, {t2}) with t0={t0}")

    def one_path(child):
        gen = gen_factory(child)
        Ws = [gen.step().W.entries for _ in range(max(t1, t2) - t0)]

        def window(tau, t):
            phi = np.eye(gen.n)
            for s in range(tau + 1, t + 1):
                phi = Ws[s - t0 - 1] @ phi
            return diam(StochasticMatrix(phi))

        return window(tau1, t1) * window(tau2, t2)

    samples = np.array(run_parallel(one_path, seeds, workers))
    mean, se = _mean_se(samples)
    return JointEstimate(windows=((tau1, t1), (tau2, t2)), mean=float(mean), se=float(se), trials=trials)


@dataclass
class JointBoundCheck:
    estimate: float
    se: float
    bound: float
    C: float
    lam: float

    @property
    def passed(self) -> bool:
        return self.estimate <= self.bound + 3.0 * self.se

    def to_dict(self) -> dict:
        return {'estimate': self.estimate, 'se': self.se, 'bound': self.bound, 'C': self.C,
                'lambda': self.lam, 'passed': self.passed}


def check_joint_bound(joint: JointEstimate, decay: DecayEstimate) -> JointBoundCheck:
    """
    Compare a joint moment with C lambda^(t1 - tau1) lambda^(t2 - tau2)

    From a single-window envelope C~ lambda~^k the joint constants are
    C = max(C~^2, C~^3) and lambda = sqrt(lambda~), which also cover
    overlapping windows.
    """
    (tau1, t1), (tau2, t2) = joint.windows
    C = max(decay.C_envelope ** 2, decay.C_envelope ** 3)
    lam = float(np.sqrt(decay.fitted_lambda))
    bound = C * lam ** (t1 - tau1) * lam ** (t2 - tau2)
    return JointBoundCheck(joint.mean, joint.se, float(bound), C, lam)


@dataclass
class ColumnCheck:
    max_deviation: float
    se: float
    steps: int
    monte_carlo: bool

    @property
    def passed(self) -> bool:
        return self.max_deviation <= EXACT_TOL + 3.0 * self.se

    def to_dict(self) -> dict:
        return {'max_deviation': self.max_deviation, 'se': self.se, 'steps': self.steps,
                'monte_carlo': self.monte_carlo, 'passed': self.passed}


def conditional_column_check(gen: ChainGenerator, steps: int, resamples: int = 200, seed=None) -> ColumnCheck:
    """
    Worst column-sum deviation of E[W(t) | F(t-1)] along a fresh copy of the chain

    Analytic conditional expectations are used when the chain has them;
    otherwise they are estimated from `resamples` draws.
    """
    path = gen.clone(gen.seed)
    rng = np.random.default_rng(seed_sequence(seed if seed is not None else 0))
    worst, worst_se = 0.0, 0.0
    monte_carlo = False
    for _ in range(steps):
        step = path.step()
        expected, se = step.cond_exp, 0.0
        if expected is None:
            if not path.supports_resampling or resamples <= 0:
                raise ConditionalLawUnavailable(f"{path.kind} chain has no conditional law")
            expected, entry_se = path.estimate_conditional(step.state, step.t, resamples, rng)
            se = float(np.sqrt((entry_se ** 2).sum(axis=0)).max())
            monte_carlo = True
        deviation = column_deviation(expected)
        if deviation > worst:
            worst, worst_se = deviation, se
    check = ColumnCheck(worst, worst_se, steps, monte_carlo)
    if not check.passed:
        logger.warning(f"{gen.kind} chain: conditional column sums deviate by {worst:.3e}")
    return check


@dataclass
class ConsensusRateStats:
    beta_rate: float
    series: np.ndarray
    ratio: float

    @property
    def passed(self) -> bool:
        return self.ratio < 1.0

    def to_dict(self) -> dict:
        return {'beta_rate': self.beta_rate, 'ratio': self.ratio, 'passed': self.passed,
                'length': int(self.series.shape[0])}


def consensus_rate_stats(traj: Trajectory, beta_rate: float) -> ConsensusRateStats:
    """
    d(x(t)) t^beta_rate and the ratio of its last-decile mean to its first-decile mean

    An identically zero series gives ratio 0.
    """
    if traj.T + 1 < MIN_RATE_SERIES:
        raise TooShort(f"need at least {MIN_RATE_SERIES} points, got {traj.T + 1}")
    series = traj.diameters * traj.times.astype(float) ** beta_rate
    decile = series.shape[0] // 10
    first, last = series[:decile].mean(), series[-decile:].mean()
    if first > 0:
        ratio = float(last / first)
    else:
        ratio = 0.0 if last == 0 else float('inf')
    return ConsensusRateStats(beta_rate=beta_rate, series=series, ratio=ratio)


@dataclass
class StoppingTimeStats:
    lambda_threshold: float
    beta: float
    times: List[int]
    gaps_scaled: List[float]

    @property
    def passed(self) -> bool:
        if len(self.gaps_scaled) < 2:
            return False
        half = len(self.gaps_scaled) // 2
        return max(self.gaps_scaled[half:]) < max(self.gaps_scaled[:half])

    def to_dict(self) -> dict:
        return {'lambda_threshold': self.lambda_threshold, 'beta': self.beta,
                'crossings': len(self.times), 'gaps_scaled': self.gaps_scaled, 'passed': self.passed}


def stopping_time_gaps(a: Sequence[float], lam: float, beta: float, t0: int = 1) -> StoppingTimeStats:
    """
    Successive times t_s = inf{t > t_(s-1) : a(t) <= lam} and the scaled gaps
    (t_(s+1) - t_s) t_s^-beta; a[k] is a(t0 + k)
    """
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        raise ValueError("empty series")
    if not 0.0 < lam < 1.0:
        raise ValueError(f"lambda must lie in (0, 1), got {lam}")
    times = (np.flatnonzero(a <= lam) + t0).tolist()
    if not times:
        raise NoCrossings(f"series never drops to {lam}")
    gaps = [(times[s + 1] - times[s]) * float(times[s]) ** (-beta) for s in range(len(times) - 1)]
    stats = StoppingTimeStats(lambda_threshold=lam, beta=beta, times=times, gaps_scaled=gaps)
    if len(gaps) < 2:
        logger.warning(f"only {len(times)} crossings of {lam}; gap trend is undefined")
    return stats


def window_diameters(gen: ChainGenerator, window: int, count: int) -> np.ndarray:
    """a(k) = diam(Phi(t + (k+1) window, t + k window)) along the generator's own path"""
    out = np.empty(count)
    for k in range(count):
        phi = np.eye(gen.n)
        for _ in range(window):
            phi = gen.step().W.entries @ phi
        out[k] = diam(StochasticMatrix(phi))
    return out


@dataclass
class SumBound:
    theta: float
    t_max: int
    M_hat: float
    ratios: np.ndarray
    rtol: float

    @property
    def ok(self) -> bool:
        quarter = max(1, self.ratios.shape[0] // 4)
        head, tail = self.ratios[:-quarter], self.ratios[-quarter:]
        if head.size == 0:
            return True
        return float(tail.max()) <= float(head.max()) * (1.0 + self.rtol) + EXACT_TOL

    def to_dict(self) -> dict:
        return {'theta': self.theta, 't_max': self.t_max, 'M_hat': self.M_hat, 'ok': self.ok}


def sum_bound_check(beta_fn: Callable[[int], float], theta: float, t_max: int, t0: int = 1,
                    rtol: float = 1e-6) -> SumBound:
    """
    M_hat = max over t0 <= tau <= t <= t_max of sum_{s=tau}^{t-1} beta(s) theta^(t-s) / beta(t)

    Terms are nonnegative so tau = t0 is the worst start; the sums follow
    D(t+1) = theta (D(t) + beta(t)). The bound is judged stable when the last
    quarter of the ratio series never exceeds the earlier maximum.
    """
    if not 0.0 <= theta < 1.0:
        raise ThetaOutOfRange(f"theta must lie in [0, 1), got {theta}")
    if t_max < t0:
        raise ValueError(f"t_max={t_max} < t0={t0}")
    ratios = np.empty(t_max - t0 + 1)
    D = 0.0
    for k, t in enumerate(range(t0, t_max + 1)):
        b = float(beta_fn(t))
        if not b > 0:
            raise ValueError(f"beta({t}) = {b} is not positive")
        ratios[k] = D / b
        D = theta * (D + b)
    return SumBound(theta=theta, t_max=t_max, M_hat=float(ratios.max()), ratios=ratios, rtol=rtol)


def contraction_audit(traj: Trajectory, pairs: Sequence[Tuple[int, int]]) -> float:
    """
    max over (tau, t) of d(x(t)) - [diam(Phi(t, tau)) d(x(tau))
    + sum_{s=tau}^{t-1} diam(Phi(t, s+1)) d(u(s))], rebuilt from logged matrices
    """
    if traj.matrices is None:
        raise MissingLogs("contraction audit needs logged matrices")
    u_diam = traj.input_diameters()
    worst = float('-inf')
    for tau, t in pairs:
        rhs = 0.0
        for s, phi in backward_products(traj, tau, t):
            contraction = diam(StochasticMatrix(phi))
            if s == tau:
                rhs += contraction * traj.diameters[tau - traj.t0]
            else:
                rhs += contraction * u_diam[s - 1 - traj.t0]
        worst = max(worst, float(traj.diameters[t - traj.t0] - rhs))
    return worst


@dataclass
class SecondMomentStats:
    series: np.ndarray
    se: np.ndarray
    slope: float
    slope_se: float
    runs: int

    @property
    def passed(self) -> bool:
        return self.slope <= self.slope_se

    def to_dict(self) -> dict:
        return {'runs': self.runs, 'slope': self.slope, 'slope_se': self.slope_se,
                'max_ratio': float(self.series.max()), 'passed': self.passed}


def second_moment_ratio(runs) -> SecondMomentStats:
    """
    Cross-run mean of d^2(x(t)) / alpha^2(t)

    Passes when a least-squares line over the last half has slope at most its
    own standard error.
    """
    runs = list(runs)
    if len(runs) < MIN_MOMENT_RUNS:
        raise TooFewRuns(f"need at least {MIN_MOMENT_RUNS} runs, got {len(runs)}")
    lengths = {run.trajectory.T for run in runs}
    if len(lengths) != 1:
        raise ValueError(f"runs have different horizons {sorted(lengths)}")
    ratios = np.stack([run.trajectory.diameters ** 2 / run.alphas ** 2 for run in runs])
    series, se = _mean_se(ratios)
    times = runs[0].trajectory.times
    half = series.shape[0] // 2
    if series.shape[0] - half < 3 or np.ptp(series[half:]) == 0:
        slope, slope_se = 0.0, 0.0
    else:
        fit = linregress(times[half:], series[half:])
        slope, slope_se = float(fit.slope), float(fit.stderr)
    return SecondMomentStats(series=series, se=se, slope=slope, slope_se=slope_se, runs=len(runs))


@dataclass
class MixingFloor:
    mean: float
    se: float
    log_theta: float
    trials: int
    window: Tuple[int, int]

    @property
    def theta(self) -> float:
        return float(np.exp(self.log_theta))

    @property
    def floor_ok(self) -> bool:
        return self.mean >= self.theta - 3.0 * self.se

    @property
    def positive(self) -> bool:
        return self.mean - 3.0 * self.se > 0.0

    @property
    def passed(self) -> bool:
        return self.floor_ok and self.positive

    def to_dict(self) -> dict:
        return {'mean': self.mean, 'se': self.se, 'log10_theta': self.log_theta / np.log(10.0),
                'trials': self.trials, 'window': list(self.window), 'floor_ok': self.floor_ok,
                'positive': self.positive, 'passed': self.passed}


def mixing_floor_estimate(gen_factory: GenFactory, B: int, gamma: float, nu: Optional[float] = None,
                          trials: int = 500, s: int = 0, seed=0,
                          workers: Optional[int] = None) -> MixingFloor:
    """
    Monte Carlo mean of mixing(Phi((n^2 + s)B, sB)) against theta = nu^(n^2 B) p^(n^2),
    p = 1 - (1 - gamma)/(1 - nu)

    Windows starting before the chain's t0 start at t0. theta is kept in log
    space since it underflows for any realistic n and B.
    """
    nu = gamma / 2.0 if nu is None else nu
    if not 0.0 < nu < gamma < 1.0:
        raise ValueError(f"need 0 < nu < gamma < 1, got nu={nu}, gamma={gamma}")
    seeds = trial_seeds(seed, trials)
    first_chain = gen_factory(seeds[0])
    n, t0 = first_chain.n, first_chain.t0
    start = max(s * B, t0)
    length = n * n * B
    p = 1.0 - (1.0 - gamma) / (1.0 - nu)
    log_theta = n * n * B * np.log(nu) + n * n * np.log(p)

    def one_path(child):
        gen = gen_factory(child)
        for _ in range(start - t0):
            gen.step()
        phi = np.eye(n)
        for _ in range(length):
            phi = gen.step().W.entries @ phi
        return mixing(StochasticMatrix(phi))

    samples = np.array(run_parallel(one_path, seeds, workers))
    mean, se = _mean_se(samples)
    floor = MixingFloor(mean=float(mean), se=float(se), log_theta=float(log_theta), trials=trials,
                        window=(start, start + length))
    logger.info(f"Mixing floor: mean {floor.mean:.4f} +/- {floor.se:.4f}, "
                f"log10 theta {floor.to_dict()['log10_theta']:.1f}")
    return floor
