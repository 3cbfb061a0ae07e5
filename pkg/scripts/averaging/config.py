"""
Experiment configuration: JSON loading, schema validation and builders
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import jsonschema
import networkx as nx
import numpy as np

from .chains import (
    ChainGenerator,
    link_failure_chain,
    pairwise_gossip_chain,
    static_chain,
    token_chain,
)
from .dynamics import spread_state
from .errors import AveragingError, ConfigError, UnboundedSubgradient
from .optimize import (
    Objective,
    StepSchedule,
    abs_deviation,
    huber,
    make_schedule,
    max_affine,
    validate_objective,
)
from .stochastic_core import (
    DEFAULT_GAMMA,
    StateBlock,
    StochasticMatrix,
    identity,
    make_state,
    metropolis_weights,
    uniform_averaging,
)

logger = logging.getLogger(__name__)

SCHEMA_PATH = Path(__file__).resolve().parents[2] / 'docs' / 'config.schema.json'


@dataclass(frozen=True)
class ChainConfig:
    spec: Dict[str, Any]

    @property
    def type(self) -> str:
        return self.spec['type']

    @property
    def gamma(self) -> float:
        return float(self.spec.get('gamma', DEFAULT_GAMMA))

    @property
    def nu(self) -> float:
        return float(self.spec.get('nu', self.gamma / 2.0))

    @property
    def t0(self) -> int:
        return int(self.spec.get('t0', 1))

    @property
    def seed(self) -> int:
        return int(self.spec.get('seed', 0))

    def B(self, n: int) -> int:
        return int(self.spec.get('B', n))


@dataclass(frozen=True)
class ExperimentConfig:
    chain: ChainConfig
    raw: Dict[str, Any]
    objectives: List[Dict[str, Any]] = field(default_factory=list)
    schedule: Optional[Dict[str, Any]] = None
    T: int = 100
    seeds: List[int] = field(default_factory=lambda: [0])
    trials: Optional[int] = None
    audits: Dict[str, Any] = field(default_factory=dict)
    verify: Dict[str, Any] = field(default_factory=dict)
    decay: Dict[str, Any] = field(default_factory=dict)
    oracle: Dict[str, Any] = field(default_factory=dict)
    export: Dict[str, Any] = field(default_factory=dict)
    ledger_retention_days: Optional[int] = None
    report: bool = True

    def fingerprint(self) -> str:
        """md5 of the canonical config JSON"""
        canonical = json.dumps(self.raw, sort_keys=True, separators=(',', ':'))
        return hashlib.md5(canonical.encode()).hexdigest()


def load_schema(path: Path = SCHEMA_PATH) -> dict:
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def parse_config(data: Dict[str, Any], schema: Optional[dict] = None) -> ExperimentConfig:
    """Validate a config dict against the schema and wrap it"""
    try:
        jsonschema.validate(instance=data, schema=schema or load_schema())
    except jsonschema.ValidationError as e:
        location = '/'.join(str(p) for p in e.absolute_path) or '<root>'
        raise ConfigError(f"{location}: {e.message}") from e

    return ExperimentConfig(
        chain=ChainConfig(data['chain']),
        raw=data,
        objectives=list(data.get('objectives', [])),
        schedule=data.get('schedule'),
        T=int(data.get('T', 100)),
        seeds=list(data.get('seeds', [data['chain'].get('seed', 0)])),
        trials=data.get('trials'),
        audits=dict(data.get('audits', {})),
        verify=dict(data.get('verify', {})),
        decay=dict(data.get('decay', {})),
        oracle=dict(data.get('oracle', {})),
        export=dict(data.get('export', {})),
        ledger_retention_days=data.get('ledger_retention_days'),
        report=bool(data.get('report', True)),
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed JSON in {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    config = parse_config(data)
    logger.info(f"Loaded {config.chain.type} experiment from {path} ({config.fingerprint()[:8]})")
    return config


def build_graph(spec: Dict[str, Any]) -> nx.Graph:
    kind = spec['kind']
    if kind == 'edges':
        if 'edges' not in spec:
            raise ConfigError("graph kind 'edges' needs an edge list")
        graph = nx.Graph()
        if 'n' in spec:
            graph.add_nodes_from(range(spec['n']))
        graph.add_edges_from(tuple(e) for e in spec['edges'])
        return graph
    if 'n' not in spec:
        raise ConfigError(f"graph kind {kind!r} needs n")
    n = spec['n']
    if kind == 'cycle':
        return nx.cycle_graph(n)
    if kind == 'path':
        return nx.path_graph(n)
    if kind == 'complete':
        return nx.complete_graph(n)
    # star: vertex 0 is the hub
    return nx.star_graph(n - 1)


def _base_schedule(spec: Dict[str, Any]) -> List[StochasticMatrix]:
    base = spec.get('base')
    if base is None:
        if 'graph' not in spec:
            raise ConfigError("link_failure chain needs a base or a graph")
        return [metropolis_weights(build_graph(spec['graph']))]
    if 'metropolis' in base:
        return [metropolis_weights(build_graph(g)) for g in base['metropolis']]
    if 'matrices' in base:
        return [StochasticMatrix.from_json(rows) for rows in base['matrices']]
    raise ConfigError("base needs 'metropolis' graphs or explicit 'matrices'")


def _static_matrix(spec: Dict[str, Any]) -> StochasticMatrix:
    matrix = spec.get('matrix')
    if isinstance(matrix, list):
        return StochasticMatrix.from_json(matrix)
    n = spec.get('n') or (build_graph(spec['graph']).number_of_nodes() if 'graph' in spec else None)
    if n is None:
        raise ConfigError("static chain needs a matrix or n")
    if matrix == 'uniform':
        return uniform_averaging(n)
    return identity(n)


def chain_from_config(chain: ChainConfig, seed=None) -> ChainGenerator:
    """Build the generator described by a chain spec; `seed` overrides spec['seed']"""
    spec = chain.spec
    seed = chain.seed if seed is None else seed
    kind = chain.type
    if kind in ('token', 'gossip') and 'graph' not in spec:
        raise ConfigError(f"{kind} chain needs a graph")
    if kind == 'token':
        return token_chain(build_graph(spec['graph']), seed, chain.t0, spec.get('initial_holder'))
    if kind == 'gossip':
        return pairwise_gossip_chain(build_graph(spec['graph']), seed, chain.t0)
    if kind == 'link_failure':
        return link_failure_chain(_base_schedule(spec), spec.get('p', 0.0), seed, chain.t0)
    return static_chain(_static_matrix(spec), seed, chain.t0)


def chain_factory(chain: ChainConfig) -> Callable[[Any], ChainGenerator]:
    """seed -> fresh generator, for the Monte Carlo estimators"""
    return lambda seed: chain_from_config(chain, seed)


def objective_from_spec(spec: Dict[str, Any]) -> Objective:
    kind = spec['type']
    if kind == 'quadratic':
        raise UnboundedSubgradient("quadratic objectives have unbounded subgradients")
    if kind == 'max_affine':
        if 'slopes' not in spec or 'offsets' not in spec:
            raise ConfigError("max_affine objective needs slopes and offsets")
        return max_affine(spec['slopes'], spec['offsets'])
    if 'a' not in spec:
        raise ConfigError(f"{kind} objective needs an anchor 'a'")
    if kind == 'huber':
        if 'delta' not in spec:
            raise ConfigError("huber objective needs delta")
        return huber(spec['a'], spec['delta'])
    return abs_deviation(spec['a'])


def objectives_from_config(config: ExperimentConfig, n: int) -> List[Objective]:
    if len(config.objectives) != n:
        raise ConfigError(f"{len(config.objectives)} objectives for {n} agents")
    try:
        objectives = [objective_from_spec(spec) for spec in config.objectives]
        for i, obj in enumerate(objectives):
            check = validate_objective(obj)
            if not check.passed:
                raise ConfigError(f"objective {i} ({obj.name}) is not convex on its samples")
    except ConfigError:
        raise
    except AveragingError as e:
        raise ConfigError(str(e)) from e
    dims = {obj.m for obj in objectives}
    if len(dims) != 1:
        raise ConfigError(f"objectives disagree on dimension: {sorted(dims)}")
    return objectives


def schedule_from_config(config: ExperimentConfig) -> StepSchedule:
    if config.schedule is None:
        raise ConfigError("optimize needs a schedule")
    try:
        return make_schedule(config.schedule['K'], config.schedule['beta'], config.schedule.get('t0', 1))
    except AveragingError as e:
        raise ConfigError(str(e)) from e


def initial_state(config: ExperimentConfig, n: int, objectives: Optional[List[Objective]] = None) -> StateBlock:
    """x0 from the config: 'spread' (default), 'anchors' (x_i = a_i) or explicit values"""
    x0 = config.raw.get('x0', 'spread')
    m = config.raw.get('m', objectives[0].m if objectives else 1)
    if x0 == 'spread':
        return spread_state(n, m)
    if x0 == 'anchors':
        anchors = [obj.anchor() for obj in objectives or []]
        if not anchors or any(a is None for a in anchors):
            raise ConfigError("x0='anchors' needs abs or huber objectives")
        return make_state(np.stack(anchors))
    state = make_state(x0)
    if state.n != n:
        raise ConfigError(f"x0 has {state.n} rows for {n} agents")
    return state
