"""
Distributed averaging and subgradient optimization over random networks
"""

from .stochastic_core import (
    StochasticMatrix, StateBlock, DirectedGraph,
    make_stochastic, make_state, identity, uniform_averaging,
    diam, mixing, state_diameter, apply, compose,
    graph_of, union_graphs, has_spanning_rooted_tree,
    is_doubly_stochastic, column_deviation, consensus_weights, metropolis_weights,
)
from .chains import (
    ChainGenerator, ChainStep, AssumptionReport,
    token_chain, pairwise_gossip_chain, link_failure_chain, static_chain,
    verify_assumptions,
)
from .dynamics import (
    Trajectory, InputPolicy,
    run_autonomous, run_controlled, transition_matrix, variation_of_constants_check, spread_state,
)
from .optimize import (
    Objective, StepSchedule, OptRun, OracleResult, OptimalSet,
    abs_deviation, huber, max_affine, validate_objective, make_schedule,
    solve_distributed, optimal_oracle, lyapunov_audit, mean_dynamics_check, summability_check,
)
from .diagnostics import (
    DecayEstimate, StoppingTimeStats,
    estimate_diam_decay, joint_diam_decay, check_joint_bound, conditional_column_check,
    consensus_rate_stats, stopping_time_gaps, window_diameters, sum_bound_check,
    contraction_audit, second_moment_ratio, mixing_floor_estimate,
)

__all__ = [
    # Matrices, states and graphs
    'StochasticMatrix', 'StateBlock', 'DirectedGraph',
    'make_stochastic', 'make_state', 'identity', 'uniform_averaging',
    'diam', 'mixing', 'state_diameter', 'apply', 'compose',
    'graph_of', 'union_graphs', 'has_spanning_rooted_tree',
    'is_doubly_stochastic', 'column_deviation', 'consensus_weights', 'metropolis_weights',
    # Random chains
    'ChainGenerator', 'ChainStep', 'AssumptionReport',
    'token_chain', 'pairwise_gossip_chain', 'link_failure_chain', 'static_chain',
    'verify_assumptions',
    # Dynamics
    'Trajectory', 'InputPolicy',
    'run_autonomous', 'run_controlled', 'transition_matrix', 'variation_of_constants_check',
    'spread_state',
    # Optimization
    'Objective', 'StepSchedule', 'OptRun', 'OracleResult', 'OptimalSet',
    'abs_deviation', 'huber', 'max_affine', 'validate_objective', 'make_schedule',
    'solve_distributed', 'optimal_oracle', 'lyapunov_audit', 'mean_dynamics_check', 'summability_check',
    # Diagnostics
    'DecayEstimate', 'StoppingTimeStats',
    'estimate_diam_decay', 'joint_diam_decay', 'check_joint_bound', 'conditional_column_check',
    'consensus_rate_stats', 'stopping_time_gaps', 'window_diameters', 'sum_bound_check',
    'contraction_audit', 'second_moment_ratio', 'mixing_floor_estimate',
]
