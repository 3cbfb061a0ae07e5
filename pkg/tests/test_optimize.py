import networkx as nx
import numpy as np
import pytest

from averaging.chains import link_failure_chain, static_chain, token_chain
from averaging.dynamics import run_controlled, spread_state
from averaging.errors import (
    BetaOutOfRange,
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
from averaging.optimize import (
    AbsDeviation,
    GradientPolicy,
    abs_deviation,
    huber,
    lyapunov_audit,
    make_schedule,
    max_affine,
    mean_dynamics_check,
    optimal_oracle,
    optrun_rows,
    solve_distributed,
    summability_check,
    total_bound,
    total_value,
    validate_objective,
)
from averaging.stochastic_core import identity, make_state, metropolis_weights
from conftest import MEDIAN_ANCHORS


def median_objectives():
    return [abs_deviation(a) for a in MEDIAN_ANCHORS]


def median_run(gen, T, log_matrices=False):
    objectives = median_objectives()
    return solve_distributed(gen, objectives, make_schedule(1.0, 0.75), make_state(MEDIAN_ANCHORS), T,
                             oracle=optimal_oracle(objectives), log_matrices=log_matrices)


class TestObjectives:
    def test_abs_deviation(self):
        f = abs_deviation(2.0)
        assert f.value(np.array([5.0])) == 3.0
        assert f.subgradient(np.array([5.0])).tolist() == [1.0]
        assert f.subgradient(np.array([2.0])).tolist() == [0.0]
        assert f.L == 1.0

    def test_abs_deviation_witness(self):
        check = validate_objective(abs_deviation([1.0, -1.0]))
        assert check.passed

    def test_huber_quadratic_region(self):
        f = huber(1.0, 0.5)
        assert f.value(np.array([1.3])) == pytest.approx(0.5 * 0.3 ** 2)
        assert f.value(np.array([3.0])) == pytest.approx(0.5 * (2.0 - 0.25))

    def test_huber_gradient_clamps(self):
        f = huber([0.0, 0.0], 1.0)
        assert f.subgradient(np.array([5.0, -7.0])).tolist() == [1.0, -1.0]
        assert f.L == 1.0

    @pytest.mark.parametrize('z', [-3.0, -0.4, 0.2, 0.7, 2.5])
    def test_huber_finite_difference(self, z):
        f = huber(0.0, 1.0)
        h = 1e-5
        numeric = (f.value(np.array([z + h])) - f.value(np.array([z - h]))) / (2 * h)
        assert numeric == pytest.approx(f.subgradient(np.array([z]))[0], abs=1e-6)

    @pytest.mark.parametrize('delta', [0.0, -1.0])
    def test_huber_delta(self, delta):
        with pytest.raises(DeltaNonpositive):
            huber(0.0, delta)

    def test_max_affine_single_piece(self):
        f = max_affine([[2.0]], [1.0])
        assert f.value(np.array([3.0])) == 7.0
        assert f.subgradient(np.array([-9.0])).tolist() == [2.0]

    def test_max_affine_absolute_value(self):
        f = max_affine([[1.0], [-1.0]], [0.0, 0.0])
        for z in (-2.0, 0.0, 3.5):
            assert f.value(np.array([z])) == abs(z)
        assert f.L == 1.0

    def test_max_affine_tie_takes_first_piece(self):
        f = max_affine([[1.0], [-1.0]], [0.0, 0.0])
        assert f.subgradient(np.array([0.0])).tolist() == [1.0]
        g = max_affine([[-1.0], [1.0]], [0.0, 0.0])
        assert g.subgradient(np.array([0.0])).tolist() == [-1.0]

    def test_max_affine_empty(self):
        with pytest.raises(EmptyPieces):
            max_affine([], [])

    def test_max_affine_length_mismatch(self):
        with pytest.raises(EmptyPieces):
            max_affine([[1.0], [2.0]], [0.0])

    def test_unbounded_selector_rejected(self):
        class Understated(AbsDeviation):
            @property
            def L(self):
                return 0.5

        with pytest.raises(UnboundedSubgradient):
            validate_objective(Understated(0.0))

    @pytest.mark.parametrize('build', [
        lambda: abs_deviation([np.nan]),
        lambda: huber([np.nan], 1.0),
        lambda: max_affine([[1.0]], [np.inf]),
    ])
    def test_non_finite_anchor_or_offset(self, build):
        with pytest.raises(NonFiniteEntry):
            build()

    @pytest.mark.parametrize('build', [
        lambda: huber([0.0], np.inf),
        lambda: max_affine([[np.inf]], [0.0]),
    ])
    def test_infinite_subgradient_bound(self, build):
        with pytest.raises(UnboundedSubgradient):
            build()

    def test_totals(self):
        objectives = median_objectives()
        assert total_value(objectives, np.array([[0.0], [2.0]])).tolist() == [6.0, 10.0]
        assert total_bound(objectives) == 5.0


class TestSchedule:
    def test_harmonic(self):
        sched = make_schedule(1.0, 1.0)
        assert sched(4) == 0.25
        assert sched.series(np.array([1, 2])).tolist() == [1.0, 0.5]

    def test_power_accepted(self):
        assert make_schedule(2.0, 0.75)(16) == pytest.approx(0.25)

    @pytest.mark.parametrize('beta', [0.5, 0.3, 1.2])
    def test_beta_rejected(self, beta):
        with pytest.raises(BetaOutOfRange):
            make_schedule(1.0, beta)

    def test_K_rejected(self):
        with pytest.raises(KNonpositive):
            make_schedule(0.0, 0.75)

    def test_t0_rejected(self):
        with pytest.raises(IndexOutOfRange):
            make_schedule(1.0, 0.75, t0=0)

    def test_undefined_at_zero(self):
        with pytest.raises(IndexOutOfRange):
            make_schedule(1.0, 0.75)(0)


class TestOracle:
    def test_odd_median(self):
        result = optimal_oracle(median_objectives())
        assert result.F_star == 6.0
        assert result.optimal_set.is_singleton
        assert result.optimal_set.lower.tolist() == [0.0]
        assert result.method == 'median'

    def test_even_median_interval(self):
        result = optimal_oracle([abs_deviation(0.0), abs_deviation(1.0)])
        assert result.F_star == 1.0
        assert result.optimal_set.lower.tolist() == [0.0]
        assert result.optimal_set.upper.tolist() == [1.0]
        assert result.optimal_set.distance(np.array([[0.5], [2.0], [-0.25]])).tolist() == [0.0, 1.0, 0.25]

    def test_single_huber(self):
        result = optimal_oracle([huber(1.5, 0.5)])
        assert result.method == 'bisection'
        assert result.F_star == pytest.approx(0.0, abs=1e-12)
        assert result.optimal_set.lower[0] == pytest.approx(1.5, abs=1e-9)

    def test_grid_on_max_affine(self):
        result = optimal_oracle([max_affine([[1.0], [-1.0]], [0.0, 0.0]), abs_deviation(1.0)])
        assert result.method == 'grid'
        assert result.F_star == pytest.approx(1.0, abs=result.error_bound + 1e-9)
        assert result.optimal_set.lower[0] <= 0.01
        assert result.optimal_set.upper[0] >= 0.99

    def test_grid_two_dimensional(self):
        objectives = [max_affine([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]], [0.0] * 4)]
        result = optimal_oracle(objectives, box=([-1.0, -1.0], [1.0, 1.0]), grid=101)
        assert result.F_star == pytest.approx(0.0, abs=1e-9)
        assert result.optimal_set.distance(np.array([[0.0, 0.0]]))[0] == pytest.approx(0.0, abs=1e-9)

    def test_minimum_on_boundary(self):
        with pytest.raises(OptimizerOnBoundary):
            optimal_oracle([max_affine([[1.0]], [0.0])])

    def test_box_too_small_for_bisection(self):
        with pytest.raises(OptimizerOnBoundary):
            optimal_oracle([huber(0.0, 1.0)], box=([5.0], [6.0]))


class TestSolver:
    def test_scalar_subgradient_descent(self):
        sched = make_schedule(1.0, 1.0)
        run = solve_distributed(static_chain(identity(1), seed=0), [abs_deviation(2.0)], sched,
                                make_state([0.0]), T=1000)
        x = 0.0
        for t in range(1, 1001):
            x = x - sched(t) * np.sign(x - 2.0)
        assert run.trajectory.values[-1, 0, 0] == pytest.approx(x, abs=1e-12)
        assert abs(x - 2.0) <= 0.01

    def test_stationary_at_common_minimizer(self, cycle5):
        objectives = [abs_deviation(1.0) for _ in range(5)]
        run = solve_distributed(token_chain(cycle5, seed=0), objectives, make_schedule(1.0, 0.75),
                                make_state([1.0] * 5), T=200)
        assert np.all(run.trajectory.values == 1.0)

    def test_matches_controlled_run(self, cycle5):
        objectives = median_objectives()
        sched = make_schedule(1.0, 0.75)
        x0 = make_state(MEDIAN_ANCHORS)
        run = solve_distributed(token_chain(cycle5, seed=17), objectives, sched, x0, T=500)
        traj = run_controlled(token_chain(cycle5, seed=17), x0, GradientPolicy(objectives, sched), T=500)
        assert np.array_equal(run.trajectory.values, traj.values)

    def test_vectorized_and_generic_subgradients_agree(self, rng):
        objectives = [huber(a, 0.7) for a in MEDIAN_ANCHORS]
        sched = make_schedule(1.0, 0.75)
        X = rng.normal(scale=3.0, size=(5, 1))
        fast = GradientPolicy(objectives, sched).subgradients(X)
        slow = np.stack([obj.subgradient(x) for obj, x in zip(objectives, X)])
        assert np.array_equal(fast, slow)

    def test_objective_count_mismatch(self, cycle5):
        with pytest.raises(DimensionMismatch):
            solve_distributed(token_chain(cycle5, seed=0), median_objectives()[:4], make_schedule(1.0, 0.75),
                              spread_state(5), T=5)

    def test_zero_horizon(self, cycle5):
        run = median_run(token_chain(cycle5, seed=0), T=0)
        assert run.trajectory.T == 0
        assert run.f_gap.tolist() == [0.0]
        rows = list(optrun_rows(run))
        assert rows == [(1, 4.0, 0.0, 1.0, 2.0)]

    def test_rows_without_oracle(self, cycle5):
        run = solve_distributed(token_chain(cycle5, seed=0), median_objectives(), make_schedule(1.0, 0.75),
                                make_state(MEDIAN_ANCHORS), T=3)
        rows = list(optrun_rows(run))
        assert len(rows) == 4
        assert np.isnan(rows[-1][2])
        with pytest.raises(MissingLogs):
            run.final_error()

    def test_summary(self, cycle5):
        summary = median_run(token_chain(cycle5, seed=1), T=100).summary()
        assert summary['T'] == 100
        assert summary['final_f_gap'] >= 0.0
        assert 'final_dist_to_opt' in summary


class TestLyapunovAudit:
    def test_consensus_with_zero_subgradients(self, cycle5):
        objectives = [abs_deviation(1.0) for _ in range(5)]
        run = solve_distributed(token_chain(cycle5, seed=0), objectives, make_schedule(1.0, 0.75),
                                make_state([1.0] * 5), T=20)
        report = lyapunov_audit(run, v=[3.0], resamples=50, drift_steps=5, seed=0)
        assert report.passed
        assert report.drift_steps == 5

    def test_v_at_average(self, cycle5):
        run = median_run(token_chain(cycle5, seed=2), T=50)
        t = run.trajectory.t0 + 30
        report = lyapunov_audit(run, v=run.xbar[30], steps=[t])
        assert report.steps_checked == 1
        assert report.violations == 0

    @pytest.mark.parametrize('v', [0.0, 1.0, -3.0])
    def test_deterministic_part_on_short_run(self, cycle5, v):
        report = lyapunov_audit(median_run(token_chain(cycle5, seed=3), T=5000), v=v)
        assert report.steps_checked == 5001
        assert report.violations == 0

    def test_two_dimensional_huber(self, cycle5, rng):
        anchors = rng.normal(size=(5, 2))
        objectives = [huber(a, 0.5) for a in anchors]
        run = solve_distributed(token_chain(cycle5, seed=4), objectives, make_schedule(1.0, 0.75),
                                make_state(anchors), T=2000)
        for v in ([0.0, 0.0], [2.0, -1.0]):
            assert lyapunov_audit(run, v=v).violations == 0

    def test_drift_on_small_token_chain(self):
        objectives = [abs_deviation(a) for a in (-1.0, 0.0, 1.0)]
        run = solve_distributed(token_chain(nx.cycle_graph(3), seed=5), objectives, make_schedule(1.0, 0.75),
                                spread_state(3), T=300)
        report = lyapunov_audit(run, v=[0.5], resamples=400, drift_steps=15, seed=1)
        assert report.violations == 0
        assert report.drift_violations == 0

    def test_step_outside_run(self, cycle5):
        run = median_run(token_chain(cycle5, seed=0), T=5)
        with pytest.raises(IndexOutOfRange):
            lyapunov_audit(run, v=0.0, steps=[50])


class TestMeanDynamics:
    def test_identity_holds_on_logged_run(self, cycle5):
        run = median_run(token_chain(cycle5, seed=6), T=400, log_matrices=True)
        report = mean_dynamics_check(run)
        assert report.passed
        assert report.gbar_ratio <= 1.0

    def test_needs_matrices(self, cycle5):
        with pytest.raises(MissingLogs):
            mean_dynamics_check(median_run(token_chain(cycle5, seed=6), T=10))


class TestSummability:
    def test_tail_shrinks_on_static_averaging(self, cycle5):
        run = median_run(static_chain(metropolis_weights(cycle5), seed=0), T=20000)
        report = summability_check(run, tol=0.05)
        assert report.passed
        assert report.tail_squared <= report.total_squared

    def test_identity_chain_never_settles(self):
        # agents never talk and sit at their anchors, so the squared tail is half the total
        run = median_run(static_chain(identity(5), seed=0), T=2000)
        assert not summability_check(run, tol=0.05).passed


def _final_errors(factory, seeds, T):
    errors, gaps = [], []
    for seed in seeds:
        run = median_run(factory(seed), T)
        errors.append(run.final_error())
        gaps.append(float(run.f_gap[-1]))
    return np.array(errors), np.array(gaps)


@pytest.mark.slow
class TestConvergence:
    def test_token_cycle_reaches_median(self, cycle5):
        errors, gaps = _final_errors(lambda s: token_chain(cycle5, seed=s), range(20), 200000)
        assert np.sum((errors <= 0.1) & (gaps <= 0.2)) >= 18

    def test_link_failures_reach_median(self, cycle5):
        base = [metropolis_weights(cycle5),
                metropolis_weights(nx.Graph([(0, 2), (2, 4), (4, 1), (1, 3), (3, 0)]))]
        errors, gaps = _final_errors(lambda s: link_failure_chain(base, 0.3, seed=s), range(20), 200000)
        assert np.sum((errors <= 0.1) & (gaps <= 0.2)) >= 18

    @pytest.mark.parametrize('v', [0.0, 1.0, -3.0])
    def test_deterministic_lyapunov_bound_everywhere(self, cycle5, v):
        run = median_run(token_chain(cycle5, seed=0), T=200000)
        assert lyapunov_audit(run, v=v).violations == 0

    def test_token_run_is_summable(self, cycle5):
        run = median_run(token_chain(cycle5, seed=0), T=200000)
        assert summability_check(run).passed
