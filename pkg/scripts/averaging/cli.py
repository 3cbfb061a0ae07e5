"""
Command-line surface: verify-chain, consensus, optimize, estimate-rate

Every command reads one JSON config (--config), writes CSV/JSON artifacts into
--out, records the run in the TinyDB ledger there and renders report.md.
Exit codes: 0 success, 1 audit or assumption failure, 2 usage/config error.
"""

import argparse
import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from .artifacts import RunLedger, write_csv, write_json, write_report
from .chains import verify_assumptions
from .config import (
    ExperimentConfig,
    chain_factory,
    chain_from_config,
    initial_state,
    load_config,
    objectives_from_config,
    schedule_from_config,
)
from .diagnostics import (
    check_joint_bound,
    conditional_column_check,
    consensus_rate_stats,
    contraction_audit,
    estimate_diam_decay,
    joint_diam_decay,
    mixing_floor_estimate,
    run_parallel,
    second_moment_ratio,
    series_rows,
    MIN_DECAY_TRIALS,
    MIN_MOMENT_RUNS,
)
from .dynamics import Trajectory, run_autonomous, summary_rows, trajectory_rows, variation_of_constants_check
from .errors import AllPathsDegenerate, AveragingError, ConfigError, WindowOrderViolation
from .optimize import (
    lyapunov_audit,
    mean_dynamics_check,
    optimal_oracle,
    optrun_rows,
    solve_distributed,
    summability_check,
)
from .stochastic_core import StochasticMatrix, compose, consensus_weights, identity, matrix_to_csv_rows

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2

LEDGER_NAME = 'runs_db.json'
AUDIT_PAIRS = 20
AUDIT_WINDOW = 2000


def _configured(what: str, fn: Callable, *args, **kwargs):
    """Run a builder; construction errors are config errors"""
    try:
        return fn(*args, **kwargs)
    except ConfigError:
        raise
    except (AveragingError, ValueError, KeyError) as e:
        raise ConfigError(f"{what}: {e}") from e


def _seeds(config: ExperimentConfig, args) -> List[int]:
    base = list(config.seeds)
    if args.trials is not None and args.command in ('consensus', 'optimize'):
        base = [base[0] + k for k in range(args.trials)]
    return [s + args.seed_offset for s in base]


def _finish(args, config: ExperimentConfig, seeds, outputs: List[str], passed: Optional[bool],
            report: Optional[dict] = None):
    out = Path(args.out)
    ledger = RunLedger(out / LEDGER_NAME)
    fingerprint = config.fingerprint()
    for seed in seeds:
        if ledger.is_duplicate(fingerprint, args.command, seed):
            logger.info(f"Seed {seed} of this config was run before; outputs overwritten")
        ledger.add_run(fingerprint, args.command, seed, outputs, passed)
    retention = args.retention_days or config.ledger_retention_days
    if retention:
        ledger.cleanup_old_entries(days=retention)
    ledger.close()

    if config.report and report is not None:
        context = {
            'command': args.command,
            'config_path': str(args.config),
            'fingerprint': fingerprint,
            'chain_type': config.chain.type,
            'n': None,
            'passed': bool(passed) if passed is not None else True,
            'T': None,
            'headline': [],
            'seeds': [],
            'seed_columns': [],
            'failures': [],
            'files': outputs,
            **report,
        }
        write_report(out, context)


def _export_trajectory(out: Path, seed: int, config: ExperimentConfig, traj: Trajectory,
                       alphas: Optional[np.ndarray] = None) -> List[str]:
    """Long-format states, the `t, d_x, alpha` summary and the run metadata for one seed"""
    names = [f"trajectory_seed{seed}.csv", f"summary_seed{seed}.csv", f"run_seed{seed}.json"]
    write_csv(out / names[0], ['t', 'agent', 'coord', 'value'], trajectory_rows(traj))
    write_csv(out / names[1], ['t', 'd_x', 'alpha'], summary_rows(traj, alphas))
    write_json(out / names[2], {
        'seed': seed,
        'chain': config.chain.spec,
        'generator': traj.metadata.get('chain'),
        'policy': traj.policy_name,
        't0': traj.t0,
        'T': traj.T,
        'n': traj.n,
        'm': traj.m,
        'files': names[:2],
    })
    return names


def _final_product(config: ExperimentConfig, seed: int, T: int) -> StochasticMatrix:
    """Phi(t0 + T, t0) of the seed's chain, rebuilt step by step"""
    gen = chain_from_config(config.chain, seed)
    phi = identity(gen.n)
    for _ in range(T):
        phi = compose(gen.step().W, phi)
    return phi


def _export_matrices(out: Path, config: ExperimentConfig, seed: int, count: int) -> List[str]:
    """The first `count` realized W(t) of the seed's path, one `row,col,value` CSV each"""
    gen = chain_from_config(config.chain, seed)
    names = []
    for _ in range(count):
        step = gen.step()
        name = f"matrices/W_seed{seed}_t{step.t}.csv"
        write_csv(out / name, ['row', 'col', 'value'], matrix_to_csv_rows(step.W))
        names.append(name)
    return names


def cmd_verify_chain(config: ExperimentConfig, args) -> int:
    """Check stochasticity, self-loops and B-connectivity; writes assumptions.json"""
    logger.info("=" * 60)
    logger.info("Verifying chain assumptions")
    logger.info("=" * 60)

    seed = _seeds(config, args)[0]
    gen = _configured('chain', chain_from_config, config.chain, seed)
    verify = config.verify
    trials = args.trials or verify.get('trials', 10)
    B = config.chain.B(gen.n)

    logger.info(f"\n1. Sampling {trials} paths of the {gen.kind} chain (B={B}, gamma={config.chain.gamma})...")
    report = _configured('verify', verify_assumptions, gen, B, config.chain.gamma,
                         horizon=verify.get('horizon'), trials=trials,
                         conditioning=verify.get('conditioning', 'window'),
                         resamples=verify.get('resamples', 200))

    logger.info("\n2. Checking conditional column sums along one path...")
    columns = conditional_column_check(gen, steps=verify.get('horizon', 4 * B),
                                       resamples=verify.get('resamples', 200), seed=seed)

    payload = {'assumptions': report.to_dict(), 'column_check': columns.to_dict(),
               'chain': gen.describe(), 'seed': seed}
    passed = report.passed and columns.passed
    payload['passed'] = passed
    out = Path(args.out)
    write_json(out / 'assumptions.json', payload)
    logger.info(f"   Assumptions {'hold' if passed else 'FAIL'}; report written to {out / 'assumptions.json'}")
    matrices = _export_matrices(out, config, seed, config.export.get('matrices', B))

    _finish(args, config, [seed], ['assumptions.json'] + matrices, passed, {
        'n': gen.n,
        'headline': [
            ('row-stochastic', report.row_stochastic_ok),
            ('self-loops', report.self_loops_ok),
            ('max column deviation', f"{report.cond_column_sums_max_dev:.3e}"),
            ('B-connectivity', report.b_connectivity_ok),
            ('windows checked', report.windows_checked),
            ('monte carlo', report.monte_carlo),
        ],
        'failures': report.failures[:20],
    })
    return EXIT_OK if passed else EXIT_FAILED


def cmd_consensus(config: ExperimentConfig, args) -> int:
    """Autonomous runs; per-seed diameters and trajectory exports plus the pooled mean diameter"""
    if config.objectives:
        raise ConfigError("consensus runs take no objectives")
    logger.info("=" * 60)
    logger.info("Running autonomous averaging")
    logger.info("=" * 60)

    seeds = _seeds(config, args)
    out = Path(args.out)
    T = config.T

    def one_seed(seed):
        gen = _configured('chain', chain_from_config, config.chain, seed)
        x0 = _configured('x0', initial_state, config, gen.n)
        traj = run_autonomous(gen, x0, T)
        name = f"consensus_seed{seed}.csv"
        # rows count elapsed steps 1..T
        write_csv(out / name, ['t', 'd_x'],
                  ((k, traj.diameters[k]) for k in range(1, T + 1)))
        monotone = bool(np.all(np.diff(traj.diameters) <= 1e-12))
        files = [name]
        if config.export.get('trajectory', True):
            files += _export_trajectory(out, seed, config, traj)
        pi, residual = consensus_weights(_final_product(config, seed, T))
        return {'seed': seed, 'n': gen.n, 'files': files, 'diameters': traj.diameters, 'monotone': monotone,
                'metadata': traj.metadata, 'consensus_weights': pi.tolist(), 'product_diam': float(residual)}

    logger.info(f"\n1. Running {len(seeds)} seed(s) for T={T} steps...")
    results = run_parallel(one_seed, seeds)

    stacked = np.stack([r['diameters'] for r in results])
    mean = stacked.mean(axis=0)
    se = stacked.std(axis=0, ddof=1) / np.sqrt(len(seeds)) if len(seeds) > 1 else np.zeros_like(mean)
    write_csv(out / 'consensus_mean.csv', ['t', 'value', 'se'], series_rows(mean[1:], se[1:], t_start=1))
    summary = {
        'T': T,
        'initial_d_x': float(mean[0]),
        'final_mean_d_x': float(mean[-1]),
        'seeds': [{'seed': r['seed'], 'final_d_x': float(r['diameters'][-1]), 'monotone': r['monotone'],
                   'consensus_weights': r['consensus_weights'], 'product_diam': r['product_diam'],
                   'metadata': r['metadata']} for r in results],
        'policy': 'none',
    }
    write_json(out / 'consensus.json', summary)
    outputs = [name for r in results for name in r['files']] + ['consensus_mean.csv', 'consensus.json']
    logger.info(f"\n2. Mean final diameter {mean[-1]:.3e} over {len(seeds)} seed(s)")

    _finish(args, config, seeds, outputs, None, {
        'n': results[0]['n'],
        'T': T,
        'headline': [('initial d_x', f"{mean[0]:.6g}"), ('final mean d_x', f"{mean[-1]:.6g}")],
        'seed_columns': ['final d_x', 'monotone'],
        'seeds': [{'seed': r['seed'], 'passed': True,
                   'cells': {'final d_x': f"{r['diameters'][-1]:.3e}", 'monotone': r['monotone']}}
                  for r in results],
    })
    return EXIT_OK


def _audit_pairs(T: int, t0: int, rng: np.random.Generator):
    hi = t0 + min(T, AUDIT_WINDOW)
    pairs = []
    for _ in range(AUDIT_PAIRS):
        tau, t = sorted(int(v) for v in rng.integers(t0, hi + 1, size=2))
        pairs.append((tau, t))
    return pairs


def cmd_optimize(config: ExperimentConfig, args) -> int:
    """Distributed subgradient runs, optimality gaps and the configured audits"""
    logger.info("=" * 60)
    logger.info("Running distributed subgradient optimization")
    logger.info("=" * 60)

    seeds = _seeds(config, args)
    out = Path(args.out)
    T = config.T
    audits = config.audits
    first_chain = _configured('chain', chain_from_config, config.chain, seeds[0])
    objectives = objectives_from_config(config, first_chain.n)
    schedule = schedule_from_config(config)
    x0 = _configured('x0', initial_state, config, first_chain.n, objectives)
    box = config.oracle.get('box')
    oracle = _configured('oracle', optimal_oracle, objectives, box=box, grid=config.oracle.get('grid'))
    tolerance = audits.get('tolerance', 0.1)
    gap_tolerance = audits.get('gap_tolerance', 0.2)
    beta_rate = audits.get('beta_rate', 0.5)
    keep_runs = audits.get('second_moment', False)

    def one_seed(k_seed):
        k, seed = k_seed
        gen = chain_from_config(config.chain, seed)
        log = k == 0 and audits.get('contraction', False)
        run = solve_distributed(gen, objectives, schedule, x0, T, oracle=oracle,
                                log_matrices=log and T <= AUDIT_WINDOW)
        name = f"optimize_seed{seed}.csv"
        write_csv(out / name, ['t', 'd_x', 'f_gap', 'alpha', 'dist_to_opt'], optrun_rows(run))
        final_gap = float(run.f_gap[-1])
        final_dist = run.final_error()
        row = {
            'seed': seed,
            'file': name,
            'final_f_gap': final_gap,
            'final_dist_to_opt': final_dist,
            'final_d_x': float(run.trajectory.diameters[-1]),
            'passed': final_dist <= tolerance and final_gap <= gap_tolerance,
        }
        if audits.get('consensus_rate', False) and T + 1 >= 100:
            row['consensus_rate'] = consensus_rate_stats(run.trajectory, beta_rate).to_dict()
        if audits.get('summability', False):
            row['summability'] = summability_check(run, audits.get('summability_tol', 0.05)).to_dict()
        exports = []
        if config.export.get('trajectory', False):
            exports = _export_trajectory(out, seed, config, run.trajectory, run.alphas)
        return row, (run if keep_runs or k == 0 else None), exports

    logger.info(f"\n1. Running {len(seeds)} seed(s) for T={T} steps...")
    results = run_parallel(one_seed, list(enumerate(seeds)))
    rows = [row for row, _, _ in results]
    exports = [name for _, _, names in results for name in names]
    first_run = results[0][1]

    summary_audits: Dict[str, dict] = {}
    failures = []
    if audits.get('contraction', False):
        logger.info("\n2. Replaying the first seed for the contraction and reconstruction audits...")
        replay = first_run
        if replay.trajectory.matrices is None:
            horizon = min(T, AUDIT_WINDOW)
            replay = solve_distributed(chain_from_config(config.chain, seeds[0]), objectives, schedule,
                                       x0, horizon, oracle=oracle, log_matrices=True)
        pairs = _audit_pairs(replay.trajectory.T, replay.trajectory.t0, np.random.default_rng(seeds[0]))
        violation = contraction_audit(replay.trajectory, pairs)
        reconstruction = max(variation_of_constants_check(replay.trajectory, tau, t) for tau, t in pairs)
        mean_dyn = mean_dynamics_check(replay)
        summary_audits['contraction'] = {'max_violation': violation, 'passed': violation <= 1e-8,
                                         'reconstruction_error': reconstruction,
                                         'reconstruction_passed': reconstruction <= 1e-8,
                                         'mean_dynamics': mean_dyn.to_dict(), 'pairs': pairs}
    if audits.get('lyapunov', False):
        logger.info("\n3. Auditing the averaged-iterate inequalities...")
        points = audits.get('lyapunov_points') or [oracle.optimal_set.lower.tolist()]
        reports = [lyapunov_audit(first_run, v, resamples=audits.get('lyapunov_resamples', 0), seed=seeds[0])
                   for v in points]
        summary_audits['lyapunov'] = {'reports': [r.to_dict() for r in reports],
                                      'passed': all(r.passed for r in reports)}
    if keep_runs:
        runs = [run for _, run, _ in results]
        if len(runs) < MIN_MOMENT_RUNS:
            logger.warning(f"second-moment audit needs {MIN_MOMENT_RUNS} seeds, have {len(runs)}; skipped")
            summary_audits['second_moment'] = {'skipped': True, 'passed': True}
        else:
            stats = second_moment_ratio(runs)
            summary_audits['second_moment'] = stats.to_dict()
            write_csv(out / 'second_moment.csv', ['t', 'value', 'se'],
                      series_rows(stats.series, stats.se, t_start=runs[0].trajectory.t0))
    for key in ('consensus_rate', 'summability'):
        per_seed = [row[key] for row in rows if key in row]
        if per_seed:
            summary_audits[key] = {'passed': all(r['passed'] for r in per_seed), 'seeds': len(per_seed)}

    converged = sum(row['passed'] for row in rows)
    fraction = converged / len(rows)
    gaps = np.array([row['final_f_gap'] for row in rows])
    min_fraction = audits.get('min_pass_fraction', 0.9)
    passed = fraction >= min_fraction and all(a['passed'] for a in summary_audits.values())
    for name, audit in summary_audits.items():
        if not audit['passed']:
            failures.append(f"audit {name} failed")
    if fraction < min_fraction:
        failures.append(f"only {converged}/{len(rows)} seeds converged")

    summary = {
        'T': T,
        'oracle': oracle.to_dict(),
        'schedule': schedule.to_dict(),
        'tolerance': tolerance,
        'gap_tolerance': gap_tolerance,
        'converged': converged,
        'seeds': rows,
        'final_gap_quantiles': dict(zip(['min', 'q25', 'median', 'q75', 'max'],
                                        np.quantile(gaps, [0.0, 0.25, 0.5, 0.75, 1.0]).tolist())),
        'audits': summary_audits,
        'passed': passed,
    }
    write_json(out / 'optimize_summary.json', summary)
    logger.info(f"\n4. {converged}/{len(rows)} seeds converged; overall {'PASS' if passed else 'FAIL'}")

    _finish(args, config, seeds, [row['file'] for row in rows] + exports + ['optimize_summary.json'], passed, {
        'n': first_chain.n,
        'T': T,
        'headline': [('F*', f"{oracle.F_star:.12g}"), ('oracle', oracle.method),
                     ('converged seeds', f"{converged}/{len(rows)}"),
                     ('median final gap', f"{summary['final_gap_quantiles']['median']:.3e}")],
        'seed_columns': ['final f_gap', 'final dist'],
        'seeds': [{'seed': row['seed'], 'passed': row['passed'],
                   'cells': {'final f_gap': f"{row['final_f_gap']:.3e}",
                             'final dist': f"{row['final_dist_to_opt']:.3e}"}} for row in rows],
        'failures': failures,
    })
    return EXIT_OK if passed else EXIT_FAILED


def cmd_estimate_rate(config: ExperimentConfig, args) -> int:
    """Fit the diameter decay rate; optional joint-window and mixing-floor checks"""
    logger.info("=" * 60)
    logger.info("Estimating contraction rate")
    logger.info("=" * 60)

    trials = args.trials or config.trials or 200
    if trials < MIN_DECAY_TRIALS:
        raise ConfigError(f"estimate-rate needs at least {MIN_DECAY_TRIALS} trials, got {trials}")
    root = _seeds(config, args)[0]
    factory = chain_factory(config.chain)
    first_chain = _configured('chain', factory, root)
    t_max = config.decay.get('t_max', config.raw.get('T', 300))
    out = Path(args.out)

    logger.info(f"\n1. Sampling {trials} products of length {t_max}...")
    try:
        decay = estimate_diam_decay(factory, t_max, trials, seed=root)
    except AllPathsDegenerate as e:
        logger.error(f"Decay fit undefined: {e}")
        write_json(out / 'decay_estimate.json', {'error': str(e), 'passed': False, 'trials': trials})
        _finish(args, config, [root], ['decay_estimate.json'], False,
                {'n': first_chain.n, 'headline': [('error', str(e))], 'failures': [str(e)]})
        return EXIT_FAILED

    payload = {'decay': decay.to_dict(), 'chain': first_chain.describe()}
    checks = []
    for windows in config.decay.get('joint_windows', []):
        logger.info(f"\n2. Joint moment over windows {windows}...")
        try:
            joint = joint_diam_decay(factory, windows, trials, seed=root)
        except WindowOrderViolation as e:
            raise ConfigError(str(e)) from e
        check = check_joint_bound(joint, decay)
        checks.append({**joint.to_dict(), **check.to_dict()})
    payload['joint'] = checks

    if config.decay.get('mixing_floor', False):
        logger.info("\n3. Estimating the mixing-coefficient floor...")
        floor = mixing_floor_estimate(factory, config.chain.B(first_chain.n), config.chain.gamma,
                                      config.chain.nu, trials=trials, seed=root)
        payload['mixing_floor'] = floor.to_dict()

    passed = (decay.fitted_lambda < 1.0 and all(c['passed'] for c in checks)
              and payload.get('mixing_floor', {}).get('passed', True))
    payload['passed'] = passed
    write_json(out / 'decay_estimate.json', payload)
    write_csv(out / 'decay_series.csv', ['t', 'value', 'se'], decay.rows())
    logger.info(f"   lambda={decay.fitted_lambda:.6f}, R^2={decay.r_squared:.4f}")

    _finish(args, config, [root], ['decay_estimate.json', 'decay_series.csv'], passed, {
        'n': first_chain.n,
        'T': t_max,
        'headline': [('fitted lambda', f"{decay.fitted_lambda:.6f}"), ('R^2', f"{decay.r_squared:.4f}"),
                     ('C envelope', f"{decay.C_envelope:.4g}"), ('trials', trials)],
        'failures': [f"joint bound {c['windows']} exceeded" for c in checks if not c['passed']],
    })
    return EXIT_OK if passed else EXIT_FAILED


COMMANDS = {
    'verify-chain': cmd_verify_chain,
    'consensus': cmd_consensus,
    'optimize': cmd_optimize,
    'estimate-rate': cmd_estimate_rate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='run_experiment',
                                     description='Averaging and distributed optimization experiments')
    sub = parser.add_subparsers(dest='command', required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__.strip().splitlines()[0])
        p.add_argument('--config', required=True, help='experiment JSON file')
        p.add_argument('--out', default='out', help='output directory (default: out)')
        p.add_argument('--trials', type=int, default=None,
                       help='Monte Carlo trials (verify-chain, estimate-rate) or seed count (consensus, optimize)')
        p.add_argument('--seed-offset', type=int, default=0, help='added to every configured seed')
        p.add_argument('--retention-days', type=int, default=None,
                       help='drop ledger entries older than this many days (default: keep all)')
        p.add_argument('--log-level', default=None, choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    if args.log_level:
        logging.getLogger().setLevel(args.log_level)
    if args.trials is not None and args.trials < 1:
        logger.error("--trials must be positive")
        return EXIT_CONFIG
    if args.retention_days is not None and args.retention_days < 1:
        logger.error("--retention-days must be positive")
        return EXIT_CONFIG

    try:
        config = load_config(args.config)
        return COMMANDS[args.command](config, args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
