#!/usr/bin/env python3
"""
Stage 1: feasibility restoration.

Builds the STL-constrained MPC over an affine prediction model and solves
either the nominal problem (every specification at robustness >= 0) or the
minimal L1 relaxation of the negotiable specifications, which yields the
smallest total relaxation that makes the specification set jointly
feasible.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from dynamics import INPUT_NAMES, STATE_NAMES, rollout, rollout_affine
from milp import INCOMPLETE, LinExpr, MilpModel, RobustnessEncoder, SolverConfig, SolverError, add_abs, solve
from stl_core import Trace, to_nnf

logger = logging.getLogger(__name__)

# Static state box used when a problem does not give one: positions, heading, speed.
# The heading box is loose; callers keep the initial heading wrapped into [-pi, pi).
DEFAULT_STATE_LOWER = (-1e3, -1e3, -4.0 * math.pi, 0.0)
DEFAULT_STATE_UPPER = (1e3, 1e3, 4.0 * math.pi, 40.0)


class SpecError(Exception):
    pass


@dataclass(frozen=True)
class NamedFormula:
    name: str
    formula: object
    text: str = None


class SpecSet:
    """Non-negotiable (hard) and negotiable (soft) formulas; soft order indexes the relaxations."""

    def __init__(self, hard=(), soft=()):
        self.hard = tuple(hard)
        self.soft = tuple(soft)
        names = [nf.name for nf in self.hard + self.soft]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise SpecError(f"duplicate specification names: {', '.join(dupes)}")

    @property
    def soft_names(self):
        return [nf.name for nf in self.soft]

    def all(self):
        return self.hard + self.soft

    def get(self, name):
        for nf in self.all():
            if nf.name == name:
                return nf
        raise SpecError(f"no specification named '{name}'")

    def __eq__(self, other):
        return isinstance(other, SpecSet) and self.hard == other.hard and self.soft == other.soft

    def __repr__(self):
        return f"SpecSet(hard={[nf.name for nf in self.hard]}, soft={self.soft_names})"


@dataclass(frozen=True)
class NominalObjective:
    """J = sum_t sum_j w_input*|u_tj| - w_goal * goal_direction . (p_T - p_0)"""
    w_input: float = 1.0
    w_goal: float = 0.0
    goal_direction: tuple = (1.0, 0.0)


@dataclass
class MpcProblem:
    horizon: object
    x0: np.ndarray
    linear_model: list
    input_lower: np.ndarray
    input_upper: np.ndarray
    state_lower: np.ndarray = None
    state_upper: np.ndarray = None
    nominal_objective: NominalObjective = field(default_factory=NominalObjective)
    exogenous: dict = field(default_factory=dict)
    params: object = None
    state_names: tuple = STATE_NAMES
    input_names: tuple = INPUT_NAMES
    free_initial_state: bool = False

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float).ravel()
        self.input_lower = np.asarray(self.input_lower, dtype=float).ravel()
        self.input_upper = np.asarray(self.input_upper, dtype=float).ravel()
        nx, nu = len(self.state_names), len(self.input_names)
        if self.state_lower is None:
            self.state_lower = np.array(DEFAULT_STATE_LOWER if nx == 4 else [-1e3] * nx, dtype=float)
        if self.state_upper is None:
            self.state_upper = np.array(DEFAULT_STATE_UPPER if nx == 4 else [1e3] * nx, dtype=float)
        self.state_lower = np.asarray(self.state_lower, dtype=float).ravel()
        self.state_upper = np.asarray(self.state_upper, dtype=float).ravel()
        if self.x0.size != nx:
            raise SpecError(f"initial state has {self.x0.size} entries, expected {nx}")
        if self.input_lower.size != nu or self.input_upper.size != nu:
            raise SpecError(f"input bounds must have {nu} entries")
        if len(self.linear_model) != self.horizon.steps - 1:
            raise SpecError(
                f"linear model has {len(self.linear_model)} steps, horizon needs {self.horizon.steps - 1}")
        for name, trace in self.exogenous.items():
            if trace.grid != self.horizon:
                raise SpecError(f"exogenous trace '{name}' is not on the planning grid")

    @classmethod
    def vehicle(cls, horizon, x0, params, linear_model, exogenous=None, nominal_objective=None,
                state_lower=None, state_upper=None):
        return cls(horizon=horizon, x0=x0.as_array() if hasattr(x0, 'as_array') else x0,
                   linear_model=linear_model,
                   input_lower=params.input_lower(), input_upper=params.input_upper(),
                   state_lower=state_lower, state_upper=state_upper,
                   nominal_objective=nominal_objective or NominalObjective(),
                   exogenous=dict(exogenous or {}), params=params)

    def reachable_bounds(self):
        """Per-step state intervals from propagating the input box through the affine model."""
        if self.free_initial_state:
            lo, hi = self.state_lower.copy(), self.state_upper.copy()
        else:
            lo, hi = self.x0.copy(), self.x0.copy()
        bounds = [(lo, hi)]
        for step in self.linear_model:
            A, B = step.A, step.B
            Ap, An = np.clip(A, 0, None), np.clip(A, None, 0)
            Bp, Bn = np.clip(B, 0, None), np.clip(B, None, 0)
            nlo = Ap @ lo + An @ hi + Bp @ self.input_lower + Bn @ self.input_upper + step.c
            nhi = Ap @ hi + An @ lo + Bp @ self.input_upper + Bn @ self.input_lower + step.c
            lo = np.maximum(nlo, self.state_lower)
            hi = np.minimum(nhi, self.state_upper)
            bounds.append((lo, hi))
        return bounds

    def simulate(self, inputs):
        """Rollout of an input sequence: nonlinear for vehicles, affine otherwise."""
        if self.params is not None:
            return np.array(rollout(self.x0, inputs, self.horizon.dt, self.params))
        return np.array(rollout_affine(self.x0, inputs, self.linear_model))

    def plan_trace(self, states):
        """Trace of a state sequence joined with the exogenous signals, for monitoring."""
        columns = {name: np.asarray(states)[:, i] for i, name in enumerate(self.state_names)}
        for agent, trace in self.exogenous.items():
            for dim in trace.dims:
                columns[f"{agent}_{dim}"] = trace.column(dim)
        return Trace.from_columns(self.horizon, columns)


class MpcEncoding:
    """One MILP over states, inputs and (optionally) relaxations for an MpcProblem."""

    def __init__(self, prob, specs, cfg=None, name='mpc'):
        self.prob = prob
        self.specs = specs
        self.cfg = cfg or SolverConfig()
        m = MilpModel(name)
        self.model = m
        steps = prob.horizon.steps
        self.x = []
        self.infeasible_bounds = False
        for t, (lo, hi) in enumerate(prob.reachable_bounds()):
            row = []
            for i, sname in enumerate(prob.state_names):
                l, h = float(lo[i]), float(hi[i])
                if l > h:
                    self.infeasible_bounds = True
                    l = h = 0.5 * (l + h)
                row.append(m.add_var(f"{sname}[{t}]", lower=l, upper=h))
            self.x.append(row)
        if self.infeasible_bounds:
            m.add_constraint(LinExpr(), '>=', 1.0, 'state_box_unreachable')
        self.u = [[m.add_var(f"{iname}[{t}]", lower=prob.input_lower[j], upper=prob.input_upper[j])
                   for j, iname in enumerate(prob.input_names)] for t in range(steps - 1)]
        for t, step in enumerate(prob.linear_model):
            for i in range(len(prob.state_names)):
                rhs = LinExpr(constant=step.c[i])
                for j in range(len(prob.state_names)):
                    if step.A[i, j] != 0.0:
                        rhs = rhs + self.x[t][j] * step.A[i, j]
                for j in range(len(prob.input_names)):
                    if step.B[i, j] != 0.0:
                        rhs = rhs + self.u[t][j] * step.B[i, j]
                m.add_constraint(self.x[t + 1][i] - rhs, '==', 0.0, f"dyn_{prob.state_names[i]}[{t}]")
        signals = {sname: [self.x[t][i] for t in range(steps)] for i, sname in enumerate(prob.state_names)}
        for j, iname in enumerate(prob.input_names):
            signals[iname] = [self.u[t][j] for t in range(steps - 1)]
        for agent, trace in prob.exogenous.items():
            for dim in trace.dims:
                signals[f"{agent}_{dim}"] = [float(v) for v in trace.column(dim)]
        self.signals = signals
        self.encoder = RobustnessEncoder(m, signals, prob.horizon, self.cfg)
        self.delta = {}

    def state_var(self, name, t):
        return self.x[t][self.prob.state_names.index(name)]

    def input_var(self, name, t):
        return self.u[t][self.prob.input_names.index(name)]

    def add_hard(self):
        for nf in self.specs.hard:
            self.encoder.constrain(to_nnf(nf.formula), 0, 0.0)

    def add_soft_strict(self):
        for nf in self.specs.soft:
            self.encoder.constrain(to_nnf(nf.formula), 0, 0.0)

    def add_soft_relaxed(self):
        for nf in self.specs.soft:
            d = self.model.add_var(f"delta[{nf.name}]", lower=0.0)
            self.delta[nf.name] = d
            self.encoder.constrain(to_nnf(nf.formula), 0, -d)
        return self.delta

    def delta_sum(self):
        return sum(self.delta.values(), LinExpr())

    def nominal_cost(self, model=None):
        """J as a LinExpr; absolute-value helpers are added to ``model`` (default: own model)."""
        obj = self.prob.nominal_objective
        m = model or self.model
        cost = LinExpr()
        if obj.w_input:
            for t, row in enumerate(self.u):
                for j, var in enumerate(row):
                    cost = cost + add_abs(m, var, f"abs_{self.prob.input_names[j]}[{t}]") * obj.w_input
        if obj.w_goal and {'px', 'py'} <= set(self.prob.state_names):
            T = self.prob.horizon.steps - 1
            dx, dy = obj.goal_direction
            px0 = self.prob.x0[self.prob.state_names.index('px')]
            py0 = self.prob.x0[self.prob.state_names.index('py')]
            progress = (self.state_var('px', T) - px0) * dx + (self.state_var('py', T) - py0) * dy
            cost = cost - progress * obj.w_goal
        return cost

    def states(self, sol):
        return np.array([[sol[v] for v in row] for row in self.x])

    def inputs(self, sol):
        return np.array([[sol[v] for v in row] for row in self.u]).reshape(len(self.u), len(self.prob.input_names))

    def deltas(self, sol):
        return {name: max(0.0, sol[var]) for name, var in self.delta.items()}


@dataclass
class NominalResult:
    status: str
    u: np.ndarray = None
    x: np.ndarray = None
    objective: float = math.nan
    solution: object = None

    @property
    def feasible(self):
        return self.u is not None


@dataclass
class RelaxationResult:
    status: str                     # feasible_strict | feasible_relaxed | hard_infeasible
    u_star: np.ndarray = None
    x_star: np.ndarray = None
    delta_star: dict = field(default_factory=dict)
    delta_min: float = math.nan
    solution: object = None
    nominal_cost: float = math.nan


def solve_nominal(prob, specs, cfg=None):
    cfg = cfg or SolverConfig()
    enc = MpcEncoding(prob, specs, cfg, 'nominal')
    enc.add_hard()
    enc.add_soft_strict()
    enc.model.set_objective(enc.nominal_cost(), 'min')
    sol = solve(enc.model, cfg)
    if not sol.ok:
        logger.info(f"nominal MPC {sol.status} ({sol.nodes} nodes)")
        return NominalResult(sol.status, solution=sol)
    return NominalResult(sol.status, enc.inputs(sol), enc.states(sol), sol.objective_value, sol)


def restore_feasibility(prob, specs, cfg=None, tie_break=True):
    """Minimal L1 relaxation of the soft specifications; hard ones stay at robustness >= 0.

    With ``tie_break`` a second solve picks, among relaxations within
    feas_tol of the minimum, the one with the lowest nominal cost.
    """
    cfg = cfg or SolverConfig()
    enc = MpcEncoding(prob, specs, cfg, 'relaxation')
    enc.add_hard()
    enc.add_soft_relaxed()
    total = enc.delta_sum()
    enc.model.set_objective(total, 'min')
    sol = solve(enc.model, cfg)
    if sol.status in INCOMPLETE and not sol.ok:
        raise SolverError(f"relaxation solve ended {sol.status} after {sol.nodes} nodes without a feasible point")
    if not sol.ok:
        logger.info(f"hard specifications infeasible ({sol.status}, {sol.nodes} nodes)")
        return RelaxationResult('hard_infeasible', solution=sol)
    if sol.status in INCOMPLETE:
        logger.warning(f"relaxation solve ended {sol.status}; using the incumbent")

    nominal_cost = math.nan
    if tie_break:
        polished = enc.model.clone('relaxation_tie_break')
        polished.add_constraint(total, '<=', sol.objective_value + cfg.feas_tol, 'delta_floor')
        polished.set_objective(enc.nominal_cost(polished), 'min')
        second = solve(polished, cfg)
        if second.ok:
            sol = second
            nominal_cost = second.objective_value

    deltas = enc.deltas(sol)
    delta_min = math.fsum(deltas.values())
    if delta_min <= cfg.feas_tol:
        deltas = {name: 0.0 for name in deltas}
        delta_min = 0.0
        status = 'feasible_strict'
    else:
        status = 'feasible_relaxed'
    logger.info(f"stage 1: {status}, minimal relaxation {delta_min:.6g} "
                f"({', '.join(f'{k}={v:.4g}' for k, v in deltas.items()) or 'no soft specs'})")
    return RelaxationResult(status, enc.inputs(sol), enc.states(sol), deltas, delta_min, sol, nominal_cost)
