#!/usr/bin/env python3
"""
Scenarios and the receding-horizon simulation loop.

A scenario fixes the road geometry, the ego vehicle, the other agents and
the hard/soft specifications. Each control cycle re-linearizes the bicycle
model about the previous plan, predicts agents at constant velocity, runs
Stage 1 and (in full mode) Stage 2, applies the first control to the
nonlinear model and advances the agents along their nominal paths.
"""
import hashlib
import json
import logging
import math
import re
from dataclasses import dataclass, field, replace

import numpy as np

from dynamics import (INPUT_NAMES, STATE_NAMES, VehicleParams, VehicleState, linearize, rollout,
                      step_discrete, wrap_heading)
from milp import SolverConfig
from risk import (AGENT_DIMS, AGENT_KINDS, AgentModel, RiskParams, default_s_max, ego_trace,
                  evaluate_risk)
from stage1 import MpcProblem, NamedFormula, NominalObjective, SpecSet, restore_feasibility
from stage2 import (Budget, EmptyFrontError, Objective, ObjectiveSpec, approximate_pareto,
                    select_action)
from stl_core import StlError, TimeGrid, Trace, parse_formula, robustness, robustness_trace

logger = logging.getLogger(__name__)

REGION_ROLES = ('drivable', 'goal', 'emergency_lane', 'obstacle')
MODES = ('stage1_only', 'full')
HARD_CHECK_TOL = 1e-6
THETA = STATE_NAMES.index('theta')

TOP_LEVEL_KEYS = {'name', 'grid', 'ego', 'params', 'regions', 'agents', 'hard_specs', 'soft_specs',
                  'objectives', 'risk', 'budget_alpha', 'cycles', 'seed', 'nominal', 'nominal_input',
                  'grid_size', 'lp_backend'}
REQUIRED_KEYS = ('grid', 'ego', 'regions', 'hard_specs', 'soft_specs', 'objectives', 'cycles', 'seed')
# fallbacks for optional scenario fields; the command line fills these from its config
SCENARIO_DEFAULTS = {'samples': 200, 'sigma': 0.3, 'grid_size': 4, 'alpha': 4.0, 'lp_backend': 'simplex'}


class ScenarioError(Exception):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
        self.message = message


class HardInfeasibleError(Exception):
    def __init__(self, log, cycle):
        super().__init__(f"hard specifications infeasible at cycle {cycle}")
        self.log = log
        self.cycle = cycle


@dataclass(frozen=True)
class Region:
    name: str
    box: tuple          # (x_lo, x_hi, y_lo, y_hi)
    role: str = 'drivable'

    def __post_init__(self):
        object.__setattr__(self, 'box', tuple(float(b) for b in self.box))
        if len(self.box) != 4:
            raise ScenarioError(f"regions.{self.name}.box", "needs four numbers")
        x_lo, x_hi, y_lo, y_hi = self.box
        if not (x_lo < x_hi and y_lo < y_hi):
            raise ScenarioError(f"regions.{self.name}.box", f"empty box {self.box}")
        if self.role not in REGION_ROLES:
            raise ScenarioError(f"regions.{self.name}.role", f"unknown role '{self.role}'")

    def inbox_text(self):
        x_lo, x_hi, y_lo, y_hi = self.box
        return f"inbox(px, py, {x_lo!r}, {x_hi!r}, {y_lo!r}, {y_hi!r})"

    def contains(self, x, y):
        x_lo, x_hi, y_lo, y_hi = self.box
        return x_lo <= x <= x_hi and y_lo <= y <= y_hi


@dataclass(frozen=True)
class AgentInit:
    """Initial state of a non-reactive agent that moves at constant velocity."""
    name: str
    kind: str
    x: float
    y: float
    vx: float = 0.0
    vy: float = 0.0
    mass: float = None
    kappa: float = None
    noise_sigma: float = 0.3

    def __post_init__(self):
        if not re.fullmatch(r"[A-Za-z][A-Za-z0-9]*", self.name):
            raise ScenarioError(f"agents.{self.name}", "agent names must be alphanumeric")
        if self.kind not in AGENT_KINDS:
            raise ScenarioError(f"agents.{self.name}.kind", f"unknown kind '{self.kind}'")

    def position(self, t):
        return self.x + self.vx * t, self.y + self.vy * t

    def predict(self, t0, grid):
        x, y = self.position(t0)
        return AgentModel.constant_velocity(self.name, self.kind, x, y, self.vx, self.vy, grid,
                                            self.mass, self.kappa, self.noise_sigma)


@dataclass
class Scenario:
    name: str
    regions: tuple
    ego_init: VehicleState
    params: VehicleParams
    agents: tuple
    specs: SpecSet
    risk_params: RiskParams
    budget_alpha: float
    horizon: TimeGrid
    objectives: ObjectiveSpec
    cycles: int
    nominal: NominalObjective = field(default_factory=NominalObjective)
    nominal_input: tuple = (0.0, 0.0)
    grid_size: int = 4
    lp_backend: str = 'simplex'

    @property
    def recede_dt(self):
        return self.horizon.dt

    @property
    def seed(self):
        return self.risk_params.seed

    def region(self, name):
        for r in self.regions:
            if r.name == name:
                return r
        raise ScenarioError('regions', f"no region named '{name}'")

    def agent(self, name):
        for a in self.agents:
            if a.name == name:
                return a
        raise ScenarioError('agents', f"no agent named '{name}'")


# ---------------------------------------------------------------------------
# Formula macros
# ---------------------------------------------------------------------------

_IN_RE = re.compile(r"\bin\(\s*([A-Za-z_]\w*)\s*\)")
_DIST_RE = re.compile(r"\bdist\(\s*([A-Za-z_]\w*)\s*\)")


def expand_macros(text, regions, agents, path='formula'):
    """Replace in(region) and dist(agent) with core grammar."""
    by_region = {r.name: r for r in regions}
    agent_names = {a.name for a in agents}

    def region_box(match):
        name = match.group(1)
        if name not in by_region:
            raise ScenarioError(path, f"undeclared region '{name}'")
        return by_region[name].inbox_text()

    def agent_gap(match):
        name = match.group(1)
        if name not in agent_names:
            raise ScenarioError(path, f"undeclared agent '{name}'")
        return f"linf(px - {name}_x, py - {name}_y)"

    return _DIST_RE.sub(agent_gap, _IN_RE.sub(region_box, text))


def allowed_dims(agents):
    dims = set(STATE_NAMES)
    for a in agents:
        dims.update(f"{a.name}_{d}" for d in AGENT_DIMS)
    return dims


def parse_spec(name, text, regions, agents, path):
    expanded = expand_macros(text, regions, agents, path)
    try:
        formula = parse_formula(expanded)
    except StlError as e:
        raise ScenarioError(path, str(e)) from e
    unknown = sorted(formula.dims() - allowed_dims(agents))
    if unknown:
        raise ScenarioError(path, f"undeclared signal(s) {', '.join(unknown)}")
    return NamedFormula(name, formula, text)


# ---------------------------------------------------------------------------
# Built-in scenarios
# ---------------------------------------------------------------------------

def _specs(regions, agents, hard, soft):
    return SpecSet(
        hard=[parse_spec(n, t, regions, agents, f"hard_specs.{n}") for n, t in hard],
        soft=[parse_spec(n, t, regions, agents, f"soft_specs.{n}") for n, t in soft])


def builtin_exp1():
    """Intersection: ambulance closing from behind, pedestrian stepping into the lane ahead."""
    grid = TimeGrid(0.2, 11)
    regions = (
        # alley between two rows of parked cars (our layout, not published)
        Region('drivable', (-30.0, 40.0, -1.5, 1.5), 'drivable'),
        Region('goal', (10.0, 40.0, -1.5, 1.5), 'goal'),
        Region('parked_left', (-30.0, 0.0, 1.5, 4.0), 'obstacle'),
        Region('parked_right', (-30.0, 0.0, -4.0, -1.5), 'obstacle'),
    )
    agents = (
        # positions and speeds are our layout
        AgentInit('ped', 'pedestrian', 4.0, 0.0, 0.0, 0.25),
        AgentInit('amb', 'ambulance', -22.0, 0.0, 12.0, 0.0),
    )
    specs = _specs(regions, agents,
                   hard=[('drivable', 'G[0,2](in(drivable))')],
                   soft=[('reach', 'F[0,2](in(goal))'),
                         ('ped_safe', 'G[0,2](dist(ped) >= 2.0)'),
                         ('amb_safe', 'G[0,2](dist(amb) >= 2.0)')])
    params = VehicleParams()
    masses = [5000.0, 70.0]
    objectives = ObjectiveSpec([
        Objective('risk_ped', 'agent_risk', agent='ped', clearance_spec='ped_safe'),
        # speed would pull toward braking, which is what lets the ambulance catch up
        Objective('risk_amb', 'agent_risk', agent='amb', clearance_spec='amb_safe', speed_weight=0.0),
        Objective('progress', 'progress', direction=(1.0, 0.0)),
    ])
    return Scenario(
        name='exp1', regions=regions,
        ego_init=VehicleState(-8.0, 0.0, 0.0, 6.0),     # our layout
        params=params, agents=agents, specs=specs,
        risk_params=RiskParams(n_samples=200, d_safe=2.0, s_max=default_s_max(1500.0, masses), seed=0),
        budget_alpha=4.0, horizon=grid, objectives=objectives, cycles=5,
        nominal=NominalObjective(w_input=1.0, w_goal=1.0, goal_direction=(1.0, 0.0)),
        grid_size=3, lp_backend='highs')


def builtin_exp2():
    """Waiting behind two cars; an out-of-control vehicle closes from behind."""
    grid = TimeGrid(0.2, 11)
    # 3.5 m lanes: emergency lane y in [-5.25, -1.75], ego lane [-1.75, 1.75], opposite lane [1.75, 5.25].
    # A solid median keeps the ego out of the opposite lane. Layout is ours.
    regions = (
        Region('road', (-40.0, 60.0, -5.25, 1.75), 'drivable'),
        Region('emergency', (-40.0, 60.0, -5.25, -1.75), 'emergency_lane'),
        # stopped cars, grown by the ego half width plus 0.5 m
        Region('car1', (5.0, 9.0, -2.3, 2.3), 'obstacle'),
        Region('car2', (11.0, 15.0, -2.3, 2.3), 'obstacle'),
    )
    agents = (
        # cyclist mass/protection index are defaults, not published
        AgentInit('cyc', 'cyclist', 15.0, 3.5, -5.0, 0.0),
        AgentInit('rear', 'rear_vehicle', -16.0, 0.0, 12.0, 0.0, mass=1500.0, kappa=1.5),
    )
    specs = _specs(regions, agents,
                   hard=[('drivable', 'G[0,2](in(road) and not in(car1) and not in(car2))')],
                   soft=[('no_emergency_lane', 'G[0,2](not in(emergency))'),
                         ('cyclist_safe', 'G[0,2](dist(cyc) >= 2.0)'),
                         ('rear_safe', 'G[0,2](dist(rear) >= 2.0)')])
    masses = [80.0, 1500.0]
    objectives = ObjectiveSpec([
        Objective('risk_rear', 'agent_risk', agent='rear', clearance_spec='rear_safe', speed_weight=0.0),
        # the median already keeps 1.75 m from the cyclist, so its clearance target is wider
        Objective('risk_cyclist', 'agent_risk', agent='cyc', clearance_spec='cyclist_safe', margin=3.0,
                  speed_weight=0.0),
        Objective('progress', 'progress', direction=(1.0, 0.0)),
    ])
    return Scenario(
        name='exp2', regions=regions,
        # rolling at 4 m/s so the first linearization has lateral authority (our choice)
        ego_init=VehicleState(0.0, 0.0, 0.0, 4.0),
        params=VehicleParams(), agents=agents, specs=specs,
        risk_params=RiskParams(n_samples=200, d_safe=2.0, s_max=default_s_max(1500.0, masses), seed=0),
        budget_alpha=4.0, horizon=grid, objectives=objectives, cycles=5,
        nominal=NominalObjective(w_input=1.0, w_goal=0.0),
        grid_size=3, lp_backend='highs')


BUILTINS = {'exp1': builtin_exp1, 'exp2': builtin_exp2}


# ---------------------------------------------------------------------------
# JSON files
# ---------------------------------------------------------------------------

def scenario_to_dict(sc):
    p = sc.params
    rp = sc.risk_params
    return {
        'name': sc.name,
        'grid': {'dt': sc.horizon.dt, 'steps': sc.horizon.steps},
        'ego': {'px': sc.ego_init.px, 'py': sc.ego_init.py, 'theta': sc.ego_init.theta, 'v': sc.ego_init.v},
        'params': {'l_r': p.l_r, 'l_f': p.l_f, 'a_min': p.a_min, 'a_max': p.a_max,
                   'beta_min': p.beta_min, 'beta_max': p.beta_max},
        'regions': [{'name': r.name, 'box': list(r.box), 'role': r.role} for r in sc.regions],
        'agents': [{k: v for k, v in a.__dict__.items() if v is not None} for a in sc.agents],
        'hard_specs': [{'name': nf.name, 'formula': nf.text} for nf in sc.specs.hard],
        'soft_specs': [{'name': nf.name, 'formula': nf.text} for nf in sc.specs.soft],
        'objectives': [_objective_dict(o) for o in sc.objectives],
        'risk': {'samples': rp.n_samples, 'd_safe': rp.d_safe, 's_max': rp.s_max, 'ego_mass': rp.ego_mass},
        'budget_alpha': sc.budget_alpha,
        'cycles': sc.cycles,
        'seed': rp.seed,
        'nominal': {'w_input': sc.nominal.w_input, 'w_goal': sc.nominal.w_goal,
                    'goal_direction': list(sc.nominal.goal_direction)},
        'nominal_input': list(sc.nominal_input),
        'grid_size': sc.grid_size,
        'lp_backend': sc.lp_backend,
    }


def _objective_dict(o):
    d = {'name': o.name, 'kind': o.kind}
    if o.agent:
        d['agent'] = o.agent
    if o.clearance_spec:
        d['clearance_spec'] = o.clearance_spec
    d.update(margin=o.margin, speed_weight=o.speed_weight, direction=list(o.direction))
    if o.weights:
        d['weights'] = [[n, w] for n, w in o.weights]
    return d


def scenario_hash(sc):
    text = json.dumps(scenario_to_dict(sc), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def save_scenario(sc, path):
    for nf in sc.specs.all():
        if nf.text is None:
            raise ScenarioError(f"specs.{nf.name}", "formula has no source text to save")
    with open(path, 'w') as f:
        json.dump(scenario_to_dict(sc), f, indent=2)
    return path


def _join(path, key):
    return f"{path}.{key}" if path else str(key)


def _require(d, keys, path):
    if not isinstance(d, dict):
        raise ScenarioError(path, "expected an object")
    for k in keys:
        if k not in d:
            raise ScenarioError(_join(path, k), "missing field")


def _list(data, key):
    value = data.get(key, [])
    if not isinstance(value, list):
        raise ScenarioError(key, "expected a list")
    for i, item in enumerate(value):
        if not isinstance(item, dict):
            raise ScenarioError(f"{key}[{i}]", "expected an object")
    return value


def _reject_unknown(d, allowed, path):
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ScenarioError(_join(path, unknown[0]), "unknown key")


def _number(d, key, path, default=None):
    if key not in d:
        if default is None:
            raise ScenarioError(_join(path, key), "missing field")
        return default
    value = d[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ScenarioError(_join(path, key), f"expected a finite number, got {value!r}")
    return value


def _build(cls, path, *args, **kwargs):
    """Construct a domain object, reporting its validation errors at ``path``."""
    try:
        return cls(*args, **kwargs)
    except ScenarioError:
        raise
    except Exception as e:
        raise ScenarioError(path, str(e)) from e


def scenario_from_dict(data, defaults=None):
    """Validated Scenario from a decoded JSON object; ``defaults`` overrides SCENARIO_DEFAULTS."""
    defaults = dict(SCENARIO_DEFAULTS, **(defaults or {}))
    _require(data, REQUIRED_KEYS, '')
    _reject_unknown(data, TOP_LEVEL_KEYS, '')

    g = data['grid']
    _require(g, ('dt', 'steps'), 'grid')
    _reject_unknown(g, ('dt', 'steps'), 'grid')
    grid = _build(TimeGrid, 'grid', float(_number(g, 'dt', 'grid')), int(_number(g, 'steps', 'grid')))

    e = data['ego']
    _require(e, STATE_NAMES, 'ego')
    _reject_unknown(e, STATE_NAMES, 'ego')
    ego = _build(VehicleState, 'ego', *(float(_number(e, n, 'ego')) for n in STATE_NAMES))

    p = data.get('params', {})
    _require(p, (), 'params')
    _reject_unknown(p, VehicleParams.__dataclass_fields__, 'params')
    params = _build(VehicleParams, 'params', **{k: float(_number(p, k, 'params')) for k in p})

    regions = []
    for i, r in enumerate(_list(data, 'regions')):
        path = f"regions[{i}]"
        _require(r, ('name', 'box'), path)
        _reject_unknown(r, ('name', 'box', 'role'), path)
        regions.append(_build(Region, path, r['name'], r['box'], r.get('role', 'drivable')))

    agents = []
    for i, a in enumerate(_list(data, 'agents')):
        path = f"agents[{i}]"
        _require(a, ('name', 'kind', 'x', 'y'), path)
        _reject_unknown(a, AgentInit.__dataclass_fields__, path)
        agents.append(_build(AgentInit, path, **dict({'noise_sigma': defaults['sigma']}, **a)))
    names = [a.name for a in agents]
    if len(set(names)) != len(names):
        raise ScenarioError('agents', "duplicate agent names")

    def spec_list(key):
        out = []
        for i, s in enumerate(_list(data, key)):
            path = f"{key}[{i}]"
            _require(s, ('name', 'formula'), path)
            _reject_unknown(s, ('name', 'formula'), path)
            out.append(parse_spec(s['name'], s['formula'], regions, agents, f"{key}.{s['name']}"))
        return out

    specs = _build(SpecSet, 'soft_specs', spec_list('hard_specs'), spec_list('soft_specs'))

    objectives = []
    for i, o in enumerate(_list(data, 'objectives')):
        path = f"objectives[{i}]"
        _require(o, ('name', 'kind'), path)
        _reject_unknown(o, Objective.__dataclass_fields__, path)
        o = dict(o)
        if 'weights' in o:
            o['weights'] = tuple(tuple(w) for w in o['weights'])
        if 'direction' in o:
            o['direction'] = tuple(o['direction'])
        if o.get('agent') and o['agent'] not in names:
            raise ScenarioError(f"{path}.agent", f"undeclared agent '{o['agent']}'")
        if o.get('clearance_spec') and o['clearance_spec'] not in specs.soft_names:
            raise ScenarioError(f"{path}.clearance_spec", f"no soft spec named '{o['clearance_spec']}'")
        objectives.append(_build(Objective, path, **o))
    objectives = _build(ObjectiveSpec, 'objectives', objectives)

    r = data.get('risk', {})
    _require(r, (), 'risk')
    _reject_unknown(r, ('samples', 'd_safe', 's_max', 'ego_mass'), 'risk')
    ego_mass = float(_number(r, 'ego_mass', 'risk', 1500.0))
    masses = [_build(AgentInit.predict, 'agents', a, 0.0, grid).mass for a in agents]
    risk_params = _build(RiskParams, 'risk',
                         n_samples=int(_number(r, 'samples', 'risk', defaults['samples'])),
                         d_safe=float(_number(r, 'd_safe', 'risk', 2.0)),
                         s_max=float(_number(r, 's_max', 'risk', default_s_max(ego_mass, masses))),
                         seed=int(_number(data, 'seed', '')),
                         ego_mass=ego_mass)

    n = data.get('nominal', {})
    _require(n, (), 'nominal')
    _reject_unknown(n, ('w_input', 'w_goal', 'goal_direction'), 'nominal')
    nominal = NominalObjective(float(_number(n, 'w_input', 'nominal', 1.0)),
                               float(_number(n, 'w_goal', 'nominal', 0.0)),
                               tuple(float(v) for v in n.get('goal_direction', (1.0, 0.0))))

    alpha = float(_number(data, 'budget_alpha', '', defaults['alpha']))
    if alpha < 0:
        raise ScenarioError('budget_alpha', "must be non-negative")
    cycles = int(_number(data, 'cycles', ''))
    if cycles < 1:
        raise ScenarioError('cycles', "must be at least 1")
    nominal_input = tuple(float(v) for v in data.get('nominal_input', (0.0, 0.0)))
    if len(nominal_input) != 2:
        raise ScenarioError('nominal_input', "needs two entries (a, beta)")
    grid_size = int(_number(data, 'grid_size', '', defaults['grid_size']))
    if grid_size < 2:
        raise ScenarioError('grid_size', "must be at least 2")
    lp_backend = data.get('lp_backend', defaults['lp_backend'])
    _build(SolverConfig, 'lp_backend', lp_backend=lp_backend)

    return Scenario(name=data.get('name', 'scenario'), regions=tuple(regions), ego_init=ego, params=params,
                    agents=tuple(agents), specs=specs, risk_params=risk_params, budget_alpha=alpha,
                    horizon=grid, objectives=objectives, cycles=cycles, nominal=nominal,
                    nominal_input=nominal_input, grid_size=grid_size, lp_backend=lp_backend)


def load_scenario(path, defaults=None):
    try:
        with open(path, 'r') as f:
            data = json.load(f)
    except OSError as e:
        raise ScenarioError('', f"cannot read scenario {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ScenarioError('', f"{path} is not valid JSON: {e}") from e
    return scenario_from_dict(data, defaults)


def resolve_scenario(name_or_path, defaults=None):
    """A built-in scenario by name, or a scenario file."""
    if name_or_path in BUILTINS:
        return BUILTINS[name_or_path]()
    return load_scenario(name_or_path, defaults)


# ---------------------------------------------------------------------------
# Receding-horizon loop
# ---------------------------------------------------------------------------

@dataclass
class CandidateRecord:
    id: int
    g_true: tuple
    delta_total: float
    pareto: bool
    selected: bool
    x_sim: np.ndarray


@dataclass
class CycleRecord:
    cycle: int
    time: float
    state: np.ndarray               # ego state at the start of the cycle
    control: np.ndarray             # executed input
    status: str                     # Stage-1 status
    delta_min: float
    stage1_deltas: dict
    deltas: dict                    # allocation of the executed plan
    robustness: dict                # monitor value of every spec on the executed plan
    risk: object
    plan: np.ndarray
    candidates: list = field(default_factory=list)
    fallback: bool = False


@dataclass
class SimLog:
    scenario: str
    mode: str
    spec_names: list
    soft_names: list
    objective_names: list
    agent_names: list
    dt: float
    cycles: list = field(default_factory=list)
    final_state: np.ndarray = None

    def states(self):
        rows = [c.state for c in self.cycles]
        if self.final_state is not None:
            rows.append(self.final_state)
        return np.array(rows)

    def __len__(self):
        return len(self.cycles)


def realized_trace(sc, log):
    """Executed ego states with the agents' nominal positions, one sample per cycle."""
    states = log.states()
    t = np.arange(len(states)) * sc.recede_dt
    columns = {name: states[:, i] for i, name in enumerate(STATE_NAMES)}
    for a in sc.agents:
        x, y = a.position(t)
        columns.update({f"{a.name}_x": x, f"{a.name}_y": y,
                        f"{a.name}_vx": np.full(len(t), a.vx), f"{a.name}_vy": np.full(len(t), a.vy)})
    return Trace.from_columns(TimeGrid(sc.recede_dt, len(states)), columns)


def realized_hard_robustness(sc, log):
    """Lowest robustness of each hard spec over the realized run; windows are clipped at its end."""
    trace = realized_trace(sc, log)
    worst = {}
    for nf in sc.specs.hard:
        values = robustness_trace(nf.formula, trace)
        worst[nf.name] = min(values) if values else math.nan
    return worst


def _reference(x0, prev_u, steps, dt, params):
    if prev_u is None:
        inputs = [np.zeros(2) for _ in range(steps - 1)]
    else:
        inputs = [np.asarray(u, dtype=float) for u in prev_u[1:]] + [np.asarray(prev_u[-1], dtype=float)]
    return rollout(x0, inputs, dt, params), inputs


def _wrapped(x):
    x = np.array(x, dtype=float)
    x[THETA] = wrap_heading(x[THETA])
    return x


def build_problem(sc, x, prev_u=None, cycle=0):
    """Cycle problem: bicycle model linearized about the shifted previous plan, agents predicted from time cycle*dt."""
    grid, dt, params = sc.horizon, sc.horizon.dt, sc.params
    agents = [a.predict(cycle * dt, grid) for a in sc.agents]
    x = _wrapped(x)
    ref_x, ref_u = _reference(x, prev_u, grid.steps, dt, params)
    prob = MpcProblem.vehicle(grid, x, params, linearize(ref_x, ref_u, dt, params),
                              exogenous={a.name: a.nominal for a in agents},
                              nominal_objective=sc.nominal)
    return prob, agents


def _monitor_all(specs, trace):
    values = {}
    for nf in specs.all():
        values[nf.name] = robustness(nf.formula, trace)
    return values


def run_receding_horizon(sc, mode='full', cfg=None, max_workers=1, warm_start=True, on_cycle=None):
    """Closed-loop run; raises HardInfeasibleError with the partial log if Stage 1 cannot hold the hard specs."""
    if mode not in MODES:
        raise ScenarioError('mode', f"unknown mode '{mode}' (choose from {', '.join(MODES)})")
    cfg = cfg or SolverConfig(lp_backend=sc.lp_backend)
    grid, dt, params = sc.horizon, sc.horizon.dt, sc.params
    log = SimLog(sc.name, mode, [nf.name for nf in sc.specs.all()], sc.specs.soft_names,
                 sc.objectives.names, [a.name for a in sc.agents], dt)
    x = _wrapped(sc.ego_init.as_array())
    prev_u = None
    nominal_u = np.tile(np.asarray(sc.nominal_input, dtype=float), (grid.steps - 1, 1))

    for cycle in range(sc.cycles):
        t0 = cycle * dt
        prob, agents = build_problem(sc, x, prev_u, cycle)
        relax = restore_feasibility(prob, sc.specs, cfg)
        if relax.status == 'hard_infeasible':
            logger.error(f"cycle {cycle}: hard specifications infeasible at state "
                         f"{', '.join(f'{n}={v:.3f}' for n, v in zip(STATE_NAMES, x))}")
            log.final_state = x
            raise HardInfeasibleError(log, cycle)

        plan_u, plan_x, deltas, risk = relax.u_star, relax.x_star, relax.delta_star, None
        records, fallback = [], False
        if mode == 'full':
            try:
                result = approximate_pareto(prob, sc.specs, Budget(relax.delta_min, sc.budget_alpha),
                                            sc.objectives, sc.grid_size, agents, sc.risk_params, cfg,
                                            warm_start=warm_start, max_workers=max_workers, fallback=relax)
                chosen = select_action(result, nominal_u)
                result.selected = chosen
                plan_u, plan_x, deltas, risk = chosen.u, chosen.x, chosen.delta, chosen.risk
                front_ids = {c.id for c in result.pareto_set}
                records = [CandidateRecord(c.id, c.g_true, c.delta_norm, c.id in front_ids, c is chosen, c.x_sim)
                           for c in result.candidates]
                logger.info(f"cycle {cycle}: selected candidate {chosen.id} of {len(result.pareto_set)} "
                            f"nondominated, objectives {', '.join(f'{v:.4g}' for v in chosen.g_true)}")
            except EmptyFrontError as e:
                logger.warning(f"cycle {cycle}: {e}; executing the Stage-1 plan")
                fallback = True

        u_exec = np.asarray(plan_u[0], dtype=float)
        x_next = _wrapped(step_discrete(x, u_exec, dt, params))
        executed = np.array(plan_x, dtype=float)
        executed[0], executed[1] = x, x_next
        trace = prob.plan_trace(executed)
        rho = _monitor_all(sc.specs, trace)
        for nf in sc.specs.hard:
            if rho[nf.name] < -HARD_CHECK_TOL:
                logger.warning(f"cycle {cycle}: hard spec {nf.name} robustness {rho[nf.name]:.3g} on executed plan")
        if risk is None:
            ego = ego_trace(grid, STATE_NAMES, prob.simulate(plan_u), plan_u, INPUT_NAMES)
            risk = evaluate_risk(ego, agents, sc.risk_params)
        log.cycles.append(CycleRecord(cycle, t0, x.copy(), u_exec, relax.status, relax.delta_min,
                                      dict(relax.delta_star), dict(deltas), rho, risk, executed,
                                      records, fallback))
        logger.info(f"cycle {cycle} ({mode}): {relax.status}, delta_min {relax.delta_min:.4g}, "
                    f"executed relaxation {sum(deltas.values()):.4g}, a={u_exec[0]:.3f} beta={u_exec[1]:.3f}")
        if on_cycle is not None:
            on_cycle(log.cycles[-1])
        x = x_next
        prev_u = plan_u
    log.final_state = x
    for name, rho in realized_hard_robustness(sc, log).items():
        if rho < -HARD_CHECK_TOL:
            logger.warning(f"hard spec {name} robustness {rho:.3g} on the realized run")
    return log


def with_overrides(sc, seed=None, alpha=None, samples=None, grid_size=None, lp_backend=None, cycles=None):
    """Copy of a scenario with command-line overrides applied."""
    rp = sc.risk_params
    if seed is not None:
        rp = replace(rp, seed=seed)
    if samples is not None:
        rp = replace(rp, n_samples=samples)
    changes = {'risk_params': rp}
    if alpha is not None:
        if alpha < 0:
            raise ScenarioError('budget_alpha', "must be non-negative")
        changes['budget_alpha'] = alpha
    if grid_size is not None:
        if grid_size < 2:
            raise ScenarioError('grid_size', "must be at least 2")
        changes['grid_size'] = grid_size
    if lp_backend is not None:
        changes['lp_backend'] = lp_backend
    if cycles is not None:
        if cycles < 1:
            raise ScenarioError('cycles', "must be at least 1")
        changes['cycles'] = cycles
    return replace(sc, **changes)
