#!/usr/bin/env python3
"""
Stage 2: value-aware refinement inside the relaxation budget.

Each objective has a linear surrogate that the MILP can bound. Grids of
surrogate bounds span [ideal, nadir] per objective; every epsilon-constraint
subproblem minimizes one surrogate with the others bounded, keeps the total
relaxation within [delta_min, delta_min + alpha], and its trajectory is then
scored with the true (Monte-Carlo) consequences. Dominance uses only those
true values.
"""
import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from milp import LinExpr, SolverConfig, add_abs, add_hinge, solve
from risk import RiskParams, ego_trace, evaluate_risk
from stage1 import MpcEncoding
from stl_core import Always, Interval, parse_formula, robustness, to_nnf

logger = logging.getLogger(__name__)

OBJECTIVE_KINDS = ('agent_risk', 'progress', 'comfort', 'terminal')
DEGENERATE_RANGE = 1e-9
# secondary weight on the total relaxation so reported deltas are the ones the plan needs
DELTA_TIE_WEIGHT = 1e-4
AUDIT_TOL = 1e-6


class ParetoError(Exception):
    pass


class EmptyFrontError(ParetoError):
    def __init__(self, message, fallback=None):
        super().__init__(message)
        self.fallback = fallback


@dataclass(frozen=True)
class Budget:
    delta_min: float
    alpha: float

    def __post_init__(self):
        if not self.delta_min >= 0:
            raise ParetoError(f"delta_min must be non-negative, got {self.delta_min}")
        if not self.alpha >= 0:
            raise ParetoError(f"alpha must be non-negative, got {self.alpha}")

    @property
    def upper(self):
        return self.delta_min + self.alpha


@dataclass(frozen=True)
class Objective:
    name: str
    kind: str
    agent: str = None
    clearance_spec: str = None      # soft spec whose operands measure clearance to the agent
    margin: float = 1.0
    speed_weight: float = 0.05
    direction: tuple = (1.0, 0.0)
    weights: tuple = ()             # terminal kind: ((state name, weight), ...)

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            raise ParetoError(f"objective {self.name}: unknown kind '{self.kind}'")
        if self.kind == 'agent_risk' and not self.agent:
            raise ParetoError(f"objective {self.name}: agent_risk needs an agent")
        object.__setattr__(self, 'direction', tuple(float(d) for d in self.direction))
        object.__setattr__(self, 'weights', tuple((str(n), float(w)) for n, w in self.weights))


class ObjectiveSpec:
    def __init__(self, objectives):
        self.objectives = tuple(objectives)
        if len(self.objectives) < 2:
            raise ParetoError("Pareto analysis needs at least two objectives")
        names = [o.name for o in self.objectives]
        if len(set(names)) != len(names):
            raise ParetoError(f"duplicate objective names in {names}")

    def __iter__(self):
        return iter(self.objectives)

    def __len__(self):
        return len(self.objectives)

    def __getitem__(self, i):
        return self.objectives[i]

    def __eq__(self, other):
        return isinstance(other, ObjectiveSpec) and self.objectives == other.objectives

    @property
    def names(self):
        return [o.name for o in self.objectives]


@dataclass(frozen=True)
class EpsilonGrid:
    values: tuple       # per objective, increasing bounds
    size: int
    ideal: tuple = ()
    nadir: tuple = ()

    def __getitem__(self, i):
        return self.values[i]


@dataclass
class Candidate:
    u: np.ndarray
    delta: dict
    x: np.ndarray
    g_true: tuple
    g_surrogate: tuple
    origin: tuple
    x_sim: np.ndarray = None
    risk: object = None
    id: int = -1
    solution: object = field(default=None, repr=False)

    @property
    def delta_norm(self):
        return math.fsum(self.delta.values())

    @property
    def control_norm(self):
        return float(np.sum(np.asarray(self.u) ** 2))

    @property
    def total_risk(self):
        return self.risk.total() if self.risk is not None else 0.0


@dataclass
class ParetoResult:
    pareto_set: list
    front: list
    dominated: list
    selected: Candidate = None
    candidates: list = field(default_factory=list)
    grid: EpsilonGrid = None
    solves: int = 0         # epsilon-constraint MILPs actually solved
    tasks: int = 0          # grid points, including those answered without a solve


# ---------------------------------------------------------------------------
# Dominance
# ---------------------------------------------------------------------------

def dominates(g1, g2):
    if len(g1) != len(g2):
        raise ParetoError(f"objective vectors differ in length: {len(g1)} vs {len(g2)}")
    return all(a <= b for a, b in zip(g1, g2)) and any(a < b for a, b in zip(g1, g2))


def pareto_filter(candidates):
    """(nondominated, dominated); equal objective vectors keep the smallest relaxation, then control norm."""
    groups = {}
    for c in candidates:
        groups.setdefault(tuple(c.g_true), []).append(c)
    representatives, dominated = [], []
    for members in groups.values():
        members = sorted(members, key=lambda c: (c.delta_norm, c.control_norm, c.id))
        representatives.append(members[0])
        dominated.extend(members[1:])
    front = []
    for c in representatives:
        if any(dominates(o.g_true, c.g_true) for o in representatives if o is not c):
            dominated.append(c)
        else:
            front.append(c)
    front.sort(key=lambda c: c.id)
    dominated.sort(key=lambda c: c.id)
    return front, dominated


def select_action(result, nominal_u):
    if not result.pareto_set:
        raise ParetoError("no Pareto candidates to select from")
    nominal_u = np.asarray(nominal_u, dtype=float)

    def key(c):
        deviation = float(np.sum((np.asarray(c.u) - nominal_u) ** 2))
        return deviation, c.total_risk, c.id

    return min(result.pareto_set, key=key)


# ---------------------------------------------------------------------------
# Subproblems
# ---------------------------------------------------------------------------

class Stage2Problem:
    """Shared base MILP (dynamics, specs, budget, surrogates) for one control cycle."""

    def __init__(self, prob, specs, budget, objectives, agents=(), risk_params=None, cfg=None):
        self.prob = prob
        self.specs = specs
        self.budget = budget
        self.objectives = objectives if isinstance(objectives, ObjectiveSpec) else ObjectiveSpec(objectives)
        self.agents = list(agents)
        self.risk_params = risk_params or RiskParams()
        cfg = cfg or SolverConfig()
        self.cfg = replace(cfg, gap_tol=max(cfg.gap_tol, cfg.stage2_gap_tol),
                           node_limit=min(cfg.node_limit, cfg.stage2_node_limit))
        self.anchors = []
        enc = MpcEncoding(prob, specs, self.cfg, 'stage2')
        self.enc = enc
        # surrogates first so the spec constraints reuse their exact clearance encodings
        self.surrogates = [self._surrogate(o) for o in self.objectives]
        enc.add_hard()
        enc.add_soft_relaxed()
        total = enc.delta_sum()
        slack = 0.5 * self.cfg.feas_tol
        if enc.delta:
            enc.model.add_constraint(total, '<=', budget.upper + slack, 'budget_upper')
            if budget.delta_min - slack > 0:
                enc.model.add_constraint(total, '>=', budget.delta_min - slack, 'budget_lower')

    def _surrogate(self, obj):
        enc = self.enc
        m = enc.model
        names = self.prob.state_names
        T = self.prob.horizon.steps - 1
        if obj.kind == 'agent_risk':
            clearance = self._clearance_formula(obj)
            expr = LinExpr()
            for g, k in enc.encoder._operands(clearance, 0, 'min'):
                r = enc.encoder.encode(g, k)
                expr = expr + add_hinge(m, LinExpr(constant=obj.margin) - r, f"short_{obj.name}[{k}]")
            if obj.speed_weight and 'v' in names:
                for t in range(1, T + 1):
                    expr = expr + enc.state_var('v', t) * obj.speed_weight
            _, hi = m.expr_bounds(expr)
            return expr * (1.0 / hi) if math.isfinite(hi) and hi > 0 else expr
        if obj.kind == 'progress':
            dx, dy = obj.direction
            px0 = self.prob.x0[names.index('px')]
            py0 = self.prob.x0[names.index('py')]
            return -((enc.state_var('px', T) - px0) * dx + (enc.state_var('py', T) - py0) * dy)
        if obj.kind == 'comfort':
            name = self.prob.input_names[0]
            return sum((add_abs(m, enc.input_var(name, t), f"comfort_{obj.name}[{t}]")
                        for t in range(T)), LinExpr())
        return sum((enc.state_var(n, T) * w for n, w in obj.weights), LinExpr())

    def _clearance_formula(self, obj):
        if obj.clearance_spec:
            return to_nnf(self.specs.get(obj.clearance_spec).formula)
        d = self.risk_params.d_safe
        horizon = Interval(0.0, self.prob.horizon.horizon)
        body = parse_formula(f"linf(px - {obj.agent}_x, py - {obj.agent}_y) >= {d!r}")
        return Always(horizon, body)

    def subproblem(self, k, bounds):
        m = self.enc.model.clone(f"eps_k{k}")
        for l, eps in bounds.items():
            m.add_constraint(self.surrogates[l], '<=', eps, f"eps_{self.objectives[l].name}")
        objective = self.surrogates[k]
        if self.enc.delta:
            objective = objective + self.enc.delta_sum() * DELTA_TIE_WEIGHT
        m.set_objective(objective, 'min')
        return m

    def surrogate_values(self, sol):
        return tuple(sol.value(s) for s in self.surrogates)

    def consequences(self, x_sim, u):
        names = self.prob.state_names
        risk = None
        if any(o.kind == 'agent_risk' for o in self.objectives):
            ego = ego_trace(self.prob.horizon, names, x_sim, u, self.prob.input_names)
            risk = evaluate_risk(ego, self.agents, self.risk_params)
        values = []
        T = self.prob.horizon.steps - 1
        for o in self.objectives:
            if o.kind == 'agent_risk':
                values.append(risk[o.agent].R if o.agent in risk else 0.0)
            elif o.kind == 'progress':
                dx, dy = o.direction
                disp = x_sim[T] - x_sim[0]
                values.append(-(disp[names.index('px')] * dx + disp[names.index('py')] * dy))
            elif o.kind == 'comfort':
                values.append(math.fsum(abs(a) for a in np.asarray(u)[:, 0]) if len(u) else 0.0)
            else:
                values.append(math.fsum(x_sim[T][names.index(n)] * w for n, w in o.weights))
        return tuple(float(v) for v in values), risk

    def audit(self, x, deltas):
        """Specs the monitor finds broken on planned states: hard below 0, soft below -delta."""
        trace = self.prob.plan_trace(x)
        broken = []
        for nf in self.specs.all():
            if not all(trace.has(d) for d in nf.formula.dims()):
                logger.debug(f"audit skips {nf.name}: refers to signals outside the state trace")
                continue
            floor = -deltas[nf.name] if nf.name in deltas else 0.0
            rho = robustness(nf.formula, trace)
            if rho < floor - AUDIT_TOL:
                broken.append((nf.name, rho, floor))
        return broken

    def candidate(self, sol, origin):
        """Scored candidate for a subproblem solution, or None if the monitor rejects its plan."""
        enc = self.enc
        x = enc.states(sol)
        delta = enc.deltas(sol)
        broken = self.audit(x, delta)
        if broken:
            logger.warning(f"subproblem {origin}: plan rejected by the monitor ("
                           + ', '.join(f"{n} {rho:.3g} < {floor:.3g}" for n, rho, floor in broken) + ')')
            return None
        u = enc.inputs(sol)
        x_sim = self.prob.simulate(u)
        g_true, risk = self.consequences(x_sim, u)
        return Candidate(u=u, delta=delta, x=x, g_true=g_true,
                         g_surrogate=self.surrogate_values(sol), origin=origin,
                         x_sim=x_sim, risk=risk, solution=sol)


def solve_epsilon_subproblem(prob, specs, budget, objectives, k, bounds, agents=(), risk_params=None,
                             cfg=None, context=None, incumbent=None):
    """Candidate minimizing surrogate k with the other surrogates bounded, or None if infeasible."""
    ctx = context or Stage2Problem(prob, specs, budget, objectives, agents, risk_params, cfg)
    sol = solve(ctx.subproblem(k, bounds), ctx.cfg, incumbent=incumbent)
    if not sol.ok:
        return None
    return ctx.candidate(sol, (k, tuple(sorted(bounds.items()))))


def _grids(ctx, c):
    m = len(ctx.objectives)
    anchors = []
    for l in range(m):
        sol = solve(ctx.subproblem(l, {}), ctx.cfg)
        if not sol.ok:
            raise ParetoError(f"single-objective problem for {ctx.objectives[l].name} is {sol.status}")
        anchors.append(sol)
    ctx.anchors = anchors
    values = [ctx.surrogate_values(sol) for sol in anchors]
    ideal = tuple(values[l][l] for l in range(m))
    nadir = tuple(max(values[a][l] for a in range(m)) for l in range(m))
    axes = []
    for l in range(m):
        if nadir[l] - ideal[l] <= DEGENERATE_RANGE:
            logger.warning(f"objective {ctx.objectives[l].name} has a degenerate range; single-point grid")
            axes.append((ideal[l],))
        else:
            axes.append(tuple(float(v) for v in np.linspace(ideal[l], nadir[l], c)))
    return EpsilonGrid(tuple(axes), c, ideal, nadir)


def build_grids(prob, specs, budget, objectives, c, agents=(), risk_params=None, cfg=None, context=None):
    if c < 2:
        raise ParetoError(f"grid size must be at least 2, got {c}")
    ctx = context or Stage2Problem(prob, specs, budget, objectives, agents, risk_params, cfg)
    return _grids(ctx, c)


def _looseness(grid, bounds):
    return math.fsum((eps - grid.ideal[l]) / max(grid.nadir[l] - grid.ideal[l], DEGENERATE_RANGE)
                     for l, eps in bounds.items())


def _covers(loose, tight):
    return all(loose[l] >= eps for l, eps in tight.items())


def _fits(values, bounds, tol):
    return all(values[l] <= eps + tol for l, eps in bounds.items())


def _run_chain(ctx, k, chain, warm_start):
    """Epsilon subproblems minimizing objective k, loosest bounds first.

    An optimum under looser bounds that already meets tighter ones is the
    optimum there too; bounds inside those of an infeasible subproblem are
    infeasible. Returns ({task index: candidate or None}, solves).
    """
    tol = ctx.cfg.feas_tol
    solved = []         # (bounds, solution, surrogate values, candidate)
    infeasible = []
    outcomes = {}
    solves = 0
    for i, bounds in chain:
        if any(_covers(b, bounds) for b in infeasible):
            outcomes[i] = None
            continue
        reuse = next((cand for b, sol, values, cand in solved
                      if sol.status == 'optimal' and _covers(b, bounds) and _fits(values, bounds, tol)), None)
        if reuse is not None:
            outcomes[i] = reuse
            continue
        incumbent = None
        if warm_start:
            pool = [(ctx.surrogate_values(sol), sol) for sol in ctx.anchors]
            pool += [(values, sol) for _, sol, values, _ in solved]
            pool = [(values[k], n, sol) for n, (values, sol) in enumerate(pool) if _fits(values, bounds, tol)]
            if pool:
                incumbent = min(pool, key=lambda p: (p[0], p[1]))[2]
        sol = solve(ctx.subproblem(k, bounds), ctx.cfg, incumbent=incumbent)
        solves += 1
        cand = None
        if sol.ok:
            cand = ctx.candidate(sol, (k, tuple(sorted(bounds.items()))))
            if cand is not None:
                solved.append((bounds, sol, ctx.surrogate_values(sol), cand))
        elif sol.status == 'infeasible':
            infeasible.append(bounds)
        outcomes[i] = cand
    return outcomes, solves


def approximate_pareto(prob, specs, budget, objectives, c, agents=(), risk_params=None, cfg=None,
                       warm_start=True, max_workers=1, fallback=None):
    """Epsilon-constraint sweep scored by true consequences; one independent chain per objective.

    Chains run on a thread pool when ``max_workers`` > 1; the result does not
    depend on the number of workers.
    """
    ctx = Stage2Problem(prob, specs, budget, objectives, agents, risk_params, cfg)
    grid = build_grids(prob, specs, budget, objectives, c, context=ctx)
    m = len(ctx.objectives)
    tasks = []
    for k in range(m):
        others = [l for l in range(m) if l != k]
        for combo in itertools.product(*(grid[l] for l in others)):
            tasks.append((k, dict(zip(others, combo))))
    chains = []
    for k in range(m):
        chain = [(i, b) for i, (kk, b) in enumerate(tasks) if kk == k]
        chain.sort(key=lambda item: (-_looseness(grid, item[1]), item[0]))
        chains.append(chain)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = [pool.submit(_run_chain, ctx, k, chains[k], warm_start) for k in range(m)]
            runs = [f.result() for f in futures]
    else:
        runs = [_run_chain(ctx, k, chains[k], warm_start) for k in range(m)]
    outcomes = {}
    for found, _ in runs:
        outcomes.update(found)
    solves = sum(n for _, n in runs)

    candidates = []
    for i in range(len(tasks)):
        cand = outcomes[i]
        if cand is not None and cand.id < 0:
            cand.id = len(candidates)
            candidates.append(cand)
    if not candidates:
        raise EmptyFrontError(f"all {len(tasks)} epsilon-constraint subproblems were infeasible", fallback)
    front, dominated = pareto_filter(candidates)
    logger.info(f"stage 2: {len(tasks)} grid points, {solves} solves, {len(candidates)} candidates, "
                f"{len(front)} nondominated")
    return ParetoResult(front, [c.g_true for c in front], dominated, None, candidates, grid, solves, len(tasks))
