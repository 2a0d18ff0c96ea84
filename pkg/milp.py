#!/usr/bin/env python3
"""
Mixed-integer linear models, big-M encodings of STL robustness, and a
branch-and-bound solver over LP relaxations.

Model building is incremental (add_var / add_constraint / set_objective).
Robustness is compiled from negation normal form: conjunction and G become
min gadgets, disjunction and F become max gadgets. Every big-M constant is
derived from interval bounds of the expressions it guards and audited
against SolverConfig.big_M.
"""
import heapq
import itertools
import logging
import math
import re
from dataclasses import dataclass, field

import numpy as np

from lib.simplex import LP_BACKENDS
from stl_core import (And, Always, Eventually, HorizonError, Not, Or, Pred, StlError,
                      TrueFormula, empty_window_reason, interval_to_indices, is_false, to_nnf)

logger = logging.getLogger(__name__)

CONTINUOUS = 'continuous'
BINARY = 'binary'
SENSES = ('<=', '>=', '==')
DECIDED_LP = ('optimal', 'infeasible', 'unbounded')
# solves that stopped early; an incumbent may still be usable
INCOMPLETE = ('node_limit', 'unresolved')


class ModelError(Exception):
    pass


class BigMError(ModelError):
    """An encoded expression's range exceeds big_M or is unbounded."""


class EncodingError(ModelError):
    pass


class SolverError(ModelError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    feas_tol: float = 1e-6
    int_tol: float = 1e-6
    gap_tol: float = 1e-6
    node_limit: int = 200000
    big_M: float = 1e4
    lp_backend: str = 'simplex'
    tighten_big_m: bool = True
    polish: bool = True
    # depth-first until the first incumbent, best-bound afterwards
    dive: bool = True
    # epsilon-constraint subproblems only: relative gap and node cap
    stage2_gap_tol: float = 1e-3
    stage2_node_limit: int = 5000

    def __post_init__(self):
        for name in ('feas_tol', 'int_tol', 'gap_tol', 'node_limit', 'big_M', 'stage2_gap_tol',
                     'stage2_node_limit'):
            if not getattr(self, name) > 0:
                raise ModelError(f"solver setting {name} must be positive, got {getattr(self, name)}")
        if self.lp_backend not in LP_BACKENDS:
            raise ModelError(f"unknown LP backend '{self.lp_backend}' (choose from {', '.join(LP_BACKENDS)})")


# ---------------------------------------------------------------------------
# Variables and expressions
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class VarRef:
    id: int
    kind: str
    lower: float
    upper: float
    name: str
    owner: int = field(repr=False, default=0)

    def __eq__(self, other):
        return isinstance(other, VarRef) and self.owner == other.owner and self.id == other.id

    def __hash__(self):
        return hash((self.owner, self.id))

    @property
    def is_binary(self):
        return self.kind == BINARY

    def __add__(self, other):
        return LinExpr.of(self) + other

    __radd__ = __add__

    def __sub__(self, other):
        return LinExpr.of(self) - other

    def __rsub__(self, other):
        return LinExpr.of(other) - self

    def __mul__(self, k):
        return LinExpr.of(self) * k

    __rmul__ = __mul__

    def __neg__(self):
        return LinExpr.of(self) * -1.0


class LinExpr:
    """Affine expression sum(coeff * var) + constant. Operations return new expressions."""

    __slots__ = ('terms', 'constant')

    def __init__(self, terms=None, constant=0.0):
        self.terms = dict(terms or {})
        self.constant = float(constant)

    @classmethod
    def of(cls, value):
        if isinstance(value, LinExpr):
            return value
        if isinstance(value, VarRef):
            return cls({value: 1.0})
        if isinstance(value, (int, float, np.floating, np.integer)):
            return cls(constant=float(value))
        raise ModelError(f"cannot build a linear expression from {value!r}")

    def __add__(self, other):
        other = LinExpr.of(other)
        terms = dict(self.terms)
        for v, c in other.terms.items():
            terms[v] = terms.get(v, 0.0) + c
        return LinExpr(terms, self.constant + other.constant)

    __radd__ = __add__

    def __sub__(self, other):
        return self + LinExpr.of(other) * -1.0

    def __rsub__(self, other):
        return LinExpr.of(other) - self

    def __mul__(self, k):
        if not isinstance(k, (int, float, np.floating, np.integer)):
            raise ModelError("linear expressions can only be scaled by numbers")
        k = float(k)
        return LinExpr({v: c * k for v, c in self.terms.items()}, self.constant * k)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def single_var(self):
        """The variable if this expression is exactly 1*var + 0."""
        if self.constant == 0.0 and len(self.terms) == 1:
            (v, c), = self.terms.items()
            if c == 1.0:
                return v
        return None

    def evaluate(self, values):
        total = self.constant
        for v, c in self.terms.items():
            total += c * values[v]
        return total

    def __repr__(self):
        parts = [f"{c:+g}*{v.name}" for v, c in self.terms.items()]
        return f"LinExpr({' '.join(parts) or '0'} {self.constant:+g})"


@dataclass(frozen=True)
class Constraint:
    expr: LinExpr
    sense: str
    rhs: float
    name: str


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class MilpModel:
    _tokens = itertools.count(1)

    def __init__(self, name='model'):
        self.name = name
        self.token = next(MilpModel._tokens)
        self.vars = []
        self.constraints = []
        self.objective_sense = 'min'
        self.objective = LinExpr()

    def add_var(self, name=None, kind=CONTINUOUS, lower=0.0, upper=math.inf):
        if kind not in (CONTINUOUS, BINARY):
            raise ModelError(f"unknown variable kind '{kind}'")
        if kind == BINARY:
            lower, upper = 0.0, 1.0
        lower, upper = float(lower), float(upper)
        if math.isnan(lower) or math.isnan(upper):
            raise ModelError(f"NaN bound on variable {name}")
        if lower > upper:
            raise ModelError(f"variable {name}: lower bound {lower} above upper bound {upper}")
        if lower == math.inf or upper == -math.inf:
            raise ModelError(f"variable {name}: empty domain [{lower}, {upper}]")
        var = VarRef(len(self.vars), kind, lower, upper, name or f"x{len(self.vars)}", self.token)
        self.vars.append(var)
        return var

    def add_binary(self, name=None):
        return self.add_var(name, BINARY)

    def _check(self, expr):
        expr = LinExpr.of(expr)
        for v, c in expr.terms.items():
            if v.owner != self.token or v.id >= len(self.vars) or self.vars[v.id] is not v:
                raise ModelError(f"variable {v.name} does not belong to model '{self.name}'")
            if not math.isfinite(c):
                raise ModelError(f"non-finite coefficient {c} on {v.name}")
        if not math.isfinite(expr.constant):
            raise ModelError(f"non-finite constant {expr.constant}")
        return expr

    def add_constraint(self, expr, sense, rhs=0.0, name=None):
        if sense not in SENSES:
            raise ModelError(f"unknown constraint sense '{sense}'")
        expr = self._check(expr)
        rhs = float(rhs)
        if not math.isfinite(rhs):
            raise ModelError(f"non-finite right-hand side {rhs}")
        body = LinExpr({v: c for v, c in expr.terms.items() if c != 0.0})
        con = Constraint(body, sense, rhs - expr.constant, name or f"c{len(self.constraints)}")
        self.constraints.append(con)
        return con

    def set_objective(self, expr, sense='min'):
        if sense not in ('min', 'max'):
            raise ModelError(f"objective sense must be 'min' or 'max', got '{sense}'")
        self.objective = self._check(expr)
        self.objective_sense = sense

    def clone(self, name=None):
        """Independent copy that shares the variables created so far."""
        other = MilpModel.__new__(MilpModel)
        other.name = name or self.name
        other.token = self.token
        other.vars = list(self.vars)
        other.constraints = list(self.constraints)
        other.objective_sense = self.objective_sense
        other.objective = self.objective
        return other

    @property
    def num_binaries(self):
        return sum(1 for v in self.vars if v.is_binary)

    def expr_bounds(self, expr):
        """Interval-arithmetic range of an expression over the variable bounds."""
        expr = LinExpr.of(expr)
        lo = hi = expr.constant
        for v, c in expr.terms.items():
            if c > 0:
                lo += c * v.lower
                hi += c * v.upper
            elif c < 0:
                lo += c * v.upper
                hi += c * v.lower
        return lo, hi

    def violations(self, values, tol=1e-6):
        """Names of constraints, bounds and integrality conditions that ``values`` break."""
        broken = []
        for v in self.vars:
            x = values[v]
            if x < v.lower - tol or x > v.upper + tol:
                broken.append(f"bound:{v.name}")
            elif v.is_binary and min(abs(x), abs(1.0 - x)) > tol:
                broken.append(f"integrality:{v.name}")
        for con in self.constraints:
            lhs = con.expr.evaluate(values)
            scale = max(1.0, abs(con.rhs))
            if con.sense == '<=' and lhs > con.rhs + tol * scale:
                broken.append(con.name)
            elif con.sense == '>=' and lhs < con.rhs - tol * scale:
                broken.append(con.name)
            elif con.sense == '==' and abs(lhs - con.rhs) > tol * scale:
                broken.append(con.name)
        return broken

    def to_lp_text(self):
        return format_lp(self)


@dataclass
class MilpSolution:
    status: str                      # optimal | infeasible | unbounded | node_limit | unresolved
    values: dict = field(default_factory=dict)
    objective_value: float = math.nan
    nodes: int = 0
    bound: float = math.nan

    @property
    def ok(self):
        return self.status == 'optimal' or (self.status in INCOMPLETE and bool(self.values))

    def __getitem__(self, var):
        return self.values[var]

    def value(self, expr):
        return LinExpr.of(expr).evaluate(self.values)


# ---------------------------------------------------------------------------
# LP text dump (CPLEX LP format)
# ---------------------------------------------------------------------------

def _lp_name(var):
    safe = re.sub(r'[^A-Za-z0-9_.]', '_', var.name)
    return f"{safe}_{var.id}"


def _lp_terms(expr):
    parts = []
    for v, c in sorted(expr.terms.items(), key=lambda kv: kv[0].id):
        if parts:
            parts.append(f"{'-' if c < 0 else '+'} {abs(c)!r} {_lp_name(v)}")
        else:
            parts.append(f"{'-' if c < 0 else ''}{abs(c)!r} {_lp_name(v)}")
    return ' '.join(parts) if parts else '0'


def format_lp(model):
    lines = [f"\\ model {model.name}"]
    if model.objective.constant:
        lines.append(f"\\ objective constant {model.objective.constant!r}")
    lines.append('Minimize' if model.objective_sense == 'min' else 'Maximize')
    lines.append(f" obj: {_lp_terms(model.objective)}")
    lines.append('Subject To')
    ops = {'<=': '<=', '>=': '>=', '==': '='}
    for con in model.constraints:
        name = re.sub(r'[^A-Za-z0-9_.]', '_', con.name)
        lines.append(f" {name}: {_lp_terms(con.expr)} {ops[con.sense]} {con.rhs!r}")
    lines.append('Bounds')
    for v in model.vars:
        if v.is_binary:
            continue
        lo = '-inf' if v.lower == -math.inf else repr(v.lower)
        hi = '+inf' if v.upper == math.inf else repr(v.upper)
        if v.lower == -math.inf and v.upper == math.inf:
            lines.append(f" {_lp_name(v)} free")
        else:
            lines.append(f" {lo} <= {_lp_name(v)} <= {hi}")
    binaries = [_lp_name(v) for v in model.vars if v.is_binary]
    if binaries:
        lines.append('Binaries')
        lines.append(' ' + ' '.join(binaries))
    lines.append('End')
    return '\n'.join(lines) + '\n'


# ---------------------------------------------------------------------------
# Branch and bound
# ---------------------------------------------------------------------------

class _LpData:
    """Dense arrays of a model, objective always minimized."""

    def __init__(self, model):
        n = len(model.vars)
        self.n = n
        self.sign = 1.0 if model.objective_sense == 'min' else -1.0
        c = np.zeros(n)
        for v, coef in model.objective.terms.items():
            c[v.id] += coef
        self.c = self.sign * c
        ub_rows, ub_rhs, eq_rows, eq_rhs = [], [], [], []
        for con in model.constraints:
            row = np.zeros(n)
            for v, coef in con.expr.terms.items():
                row[v.id] += coef
            if con.sense == '<=':
                ub_rows.append(row)
                ub_rhs.append(con.rhs)
            elif con.sense == '>=':
                ub_rows.append(-row)
                ub_rhs.append(-con.rhs)
            else:
                eq_rows.append(row)
                eq_rhs.append(con.rhs)
        self.A_ub = np.array(ub_rows).reshape(-1, n)
        self.b_ub = np.array(ub_rhs, dtype=float)
        self.A_eq = np.array(eq_rows).reshape(-1, n)
        self.b_eq = np.array(eq_rhs, dtype=float)
        self.lower = np.array([v.lower for v in model.vars], dtype=float)
        self.upper = np.array([v.upper for v in model.vars], dtype=float)
        self.binaries = np.array([v.id for v in model.vars if v.is_binary], dtype=int)


def _most_fractional(x, binaries, int_tol):
    if binaries.size == 0:
        return None
    vals = x[binaries]
    frac = np.minimum(vals - np.floor(vals), np.ceil(vals) - vals)
    if frac.max() <= int_tol:
        return None
    score = np.where(frac > int_tol, np.abs(vals - np.floor(vals) - 0.5), np.inf)
    return int(binaries[int(np.argmin(score))])


def solve(model, cfg=None, incumbent=None):
    """Branch and bound with best-bound node selection and most-fractional branching.

    ``incumbent`` may be a MilpSolution or a mapping VarRef -> value; it is
    used as the starting upper bound only if it satisfies the model.
    """
    cfg = cfg or SolverConfig()
    if not model.vars:
        raise ModelError(f"model '{model.name}' has no variables")
    data = _LpData(model)
    backends = [cfg.lp_backend] + [name for name in LP_BACKENDS if name != cfg.lp_backend]

    def relax(lower, upper):
        # an undecided relaxation is retried with the other backends before giving up
        for name in backends:
            res = LP_BACKENDS[name](data.c, data.A_ub, data.b_ub, data.A_eq, data.b_eq, lower, upper,
                                    feas_tol=cfg.feas_tol)
            if res.status in DECIDED_LP:
                return res
            logger.warning(f"{model.name}: {name} relaxation {res.status}")
        return res

    def gap(obj):
        return cfg.gap_tol * max(1.0, abs(obj))

    best_x, best_obj = None, math.inf
    if incumbent is not None:
        start = incumbent.values if isinstance(incumbent, MilpSolution) else incumbent
        if start and all(v in start for v in model.vars):
            if not model.violations(start, cfg.feas_tol):
                best_x = np.array([start[v] for v in model.vars], dtype=float)
                best_obj = float(data.c @ best_x)
                logger.debug(f"{model.name}: warm start accepted, objective {best_obj:.6g}")

    root = relax(data.lower, data.upper)
    nodes = 1
    if root.status == 'infeasible':
        return MilpSolution('infeasible', nodes=nodes)
    if root.status == 'unbounded':
        return MilpSolution('unbounded', nodes=nodes)
    if root.status != 'optimal':
        raise SolverError(f"{model.name}: root relaxation failed ({root.status})")

    counter = itertools.count()
    # nodes are (key, order, bound, lower, upper, x); key is the bound, or -order while diving
    heap = []
    diving = cfg.dive
    hit_limit = False
    # bounds of subtrees whose relaxation no backend could decide
    unresolved = []

    def push(bound, lower, upper, x):
        order = next(counter)
        heapq.heappush(heap, (-order if diving else bound, order, bound, lower, upper, x))

    def consider(res, lower, upper):
        nonlocal best_x, best_obj, diving, heap
        if best_x is not None and res.fun >= best_obj - gap(best_obj):
            return
        if _most_fractional(res.x, data.binaries, cfg.int_tol) is None:
            best_x, best_obj = res.x, res.fun
            if diving:
                diving = False
                heap = [(node[2],) + node[1:] for node in heap]
                heapq.heapify(heap)
            return
        push(res.fun, lower, upper, res.x)

    if best_x is not None:
        diving = False
    consider(root, data.lower.copy(), data.upper.copy())
    root_bound = root.fun
    while heap:
        node = heapq.heappop(heap)
        _, _, bound, lower, upper, x = node
        if best_x is not None and bound >= best_obj - gap(best_obj):
            heap.clear()
            break
        j = _most_fractional(x, data.binaries, cfg.int_tol)
        # the rounded side goes last so a dive takes it first
        rounded = float(round(x[j]))
        for fix in (1.0 - rounded, rounded):
            if nodes >= cfg.node_limit:
                hit_limit = True
                break
            child_lo, child_hi = lower.copy(), upper.copy()
            child_lo[j] = child_hi[j] = fix
            res = relax(child_lo, child_hi)
            nodes += 1
            if res.status == 'optimal':
                consider(res, child_lo, child_hi)
            elif res.status not in ('infeasible', 'unbounded'):
                unresolved.append(bound)
        if hit_limit:
            heapq.heappush(heap, node)
            break
        if nodes % 1000 < 2:
            logger.debug(f"{model.name}: {nodes} nodes, open {len(heap)}, incumbent {best_obj:.6g}")

    if hit_limit:
        logger.warning(f"{model.name}: node limit {cfg.node_limit} reached")
    unresolved = [b for b in unresolved if best_x is None or b < best_obj - gap(best_obj)]
    if unresolved:
        logger.warning(f"{model.name}: {len(unresolved)} subtree(s) left undecided by every LP backend")
    status = 'node_limit' if hit_limit else 'unresolved' if unresolved else 'optimal'
    if best_x is None:
        return MilpSolution('infeasible' if status == 'optimal' else status, nodes=nodes,
                            bound=data.sign * root_bound)

    if cfg.polish and data.binaries.size:
        lower, upper = data.lower.copy(), data.upper.copy()
        fixed = np.round(best_x[data.binaries])
        lower[data.binaries] = fixed
        upper[data.binaries] = fixed
        res = relax(lower, upper)
        # integer-feasible by construction; replaces an incumbent that leaned on int_tol slack
        if res.status == 'optimal':
            best_x, best_obj = res.x, res.fun
    values = {v: float(best_x[v.id]) for v in model.vars}
    for i in data.binaries:
        values[model.vars[i]] = float(round(values[model.vars[i]]))
    open_bound = min([node[2] for node in heap] + unresolved, default=best_obj)
    return MilpSolution(status, values,
                        model.objective.evaluate(values), nodes, data.sign * min(open_bound, best_obj))


# ---------------------------------------------------------------------------
# Gadgets
# ---------------------------------------------------------------------------

def as_var(m, expr, name):
    """A variable equal to ``expr`` (the expression itself if it already is one)."""
    expr = LinExpr.of(expr)
    var = expr.single_var()
    if var is not None:
        return var
    lo, hi = m.expr_bounds(expr)
    r = m.add_var(name, lower=lo, upper=hi)
    m.add_constraint(r - expr, '==', 0.0, f"{name}_def")
    return r


def add_hinge(m, expr, name):
    """s >= max(0, expr) as a continuous variable; exact under minimization."""
    expr = LinExpr.of(expr)
    _, hi = m.expr_bounds(expr)
    s = m.add_var(name, lower=0.0, upper=max(0.0, hi))
    m.add_constraint(s - expr, '>=', 0.0, f"{name}_hinge")
    return s


def add_abs(m, expr, name):
    """s >= |expr|; exact under minimization."""
    expr = LinExpr.of(expr)
    lo, hi = m.expr_bounds(expr)
    s = m.add_var(name, lower=0.0, upper=max(abs(lo), abs(hi)))
    m.add_constraint(s - expr, '>=', 0.0, f"{name}_pos")
    m.add_constraint(s + expr, '>=', 0.0, f"{name}_neg")
    return s


def _big_m(needed, cfg, what):
    if not math.isfinite(needed):
        raise BigMError(f"{what}: unbounded expression range; every encoded variable needs finite bounds")
    if needed > cfg.big_M:
        raise BigMError(f"{what}: expression range {needed:.6g} exceeds big_M {cfg.big_M:.6g}")
    return max(0.0, needed) if cfg.tighten_big_m else cfg.big_M


def _extremum(m, exprs, cfg, kind, name):
    exprs = [LinExpr.of(e) for e in exprs]
    if not exprs:
        raise EncodingError(f"{name}: {kind} of no expressions")
    bounds = [m.expr_bounds(e) for e in exprs]
    keep = list(range(len(exprs)))
    # drop members that can never be the unique extremum
    for i in range(len(exprs)):
        others = [j for j in keep if j != i]
        if kind == 'min' and any(bounds[j][1] <= bounds[i][0] for j in others):
            keep.remove(i)
        elif kind == 'max' and any(bounds[j][0] >= bounds[i][1] for j in others):
            keep.remove(i)
    if len(keep) == 1:
        return exprs[keep[0]]
    if kind == 'min':
        lo = min(bounds[i][0] for i in keep)
        hi = min(bounds[i][1] for i in keep)
    else:
        lo = max(bounds[i][0] for i in keep)
        hi = max(bounds[i][1] for i in keep)
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise BigMError(f"{name}: unbounded expression range; every encoded variable needs finite bounds")
    r = m.add_var(name, lower=lo, upper=hi)
    selectors = []
    for i in keep:
        z = m.add_binary(f"{name}_z{i}")
        selectors.append(z)
        e = exprs[i]
        if kind == 'min':
            M = _big_m(bounds[i][1] - lo, cfg, name)
            m.add_constraint(r - e, '<=', 0.0, f"{name}_le{i}")
            # r >= e - M (1 - z)
            m.add_constraint(r - e - M * z, '>=', -M, f"{name}_sel{i}")
        else:
            M = _big_m(hi - bounds[i][0], cfg, name)
            m.add_constraint(r - e, '>=', 0.0, f"{name}_ge{i}")
            # r <= e + M (1 - z)
            m.add_constraint(r - e + M * z, '<=', M, f"{name}_sel{i}")
    m.add_constraint(sum(selectors, LinExpr()), '==', 1.0, f"{name}_one")
    return LinExpr.of(r)


def encode_min(m, exprs, cfg=None, name='rmin'):
    return as_var(m, _extremum(m, exprs, cfg or SolverConfig(), 'min', name), name)


def encode_max(m, exprs, cfg=None, name='rmax'):
    return as_var(m, _extremum(m, exprs, cfg or SolverConfig(), 'max', name), name)


# ---------------------------------------------------------------------------
# STL robustness
# ---------------------------------------------------------------------------

class RobustnessEncoder:
    """Compiles formulas over a signal table into one model, sharing encodings.

    ``signals`` maps a dimension name to a per-sample sequence of VarRef,
    LinExpr or float. The cache maps (formula, index) to the LinExpr equal
    to its robustness, so any sub-formula is encoded at most once.
    """

    def __init__(self, model, signals, grid, cfg=None):
        self.model = model
        self.signals = signals
        self.grid = grid
        self.cfg = cfg or SolverConfig()
        self.cache = {}
        self._bounds = {}
        self._count = itertools.count()

    def _name(self, prefix):
        return f"{prefix}{next(self._count)}"

    def predicate_expr(self, pred, t):
        expr = LinExpr(constant=pred.offset)
        for dim, c in pred.coeffs:
            if dim not in self.signals:
                raise StlError(f"unknown dimension '{dim}'")
            column = self.signals[dim]
            if not 0 <= t < len(column):
                raise StlError(f"index {t} outside signal '{dim}' of {len(column)} samples")
            expr = expr + LinExpr.of(column[t]) * c
        return expr

    def _window(self, f, t):
        indices = interval_to_indices(f.interval, self.grid, t)
        if len(indices) == 0:
            raise HorizonError(f"temporal operator at index {t} has no samples: "
                               f"{empty_window_reason(f.interval, self.grid, t)}")
        return indices

    def _operands(self, f, t, kind):
        """Flatten nested same-kind nodes into (formula, index) operands."""
        if kind == 'min' and isinstance(f, And):
            return self._operands(f.left, t, kind) + self._operands(f.right, t, kind)
        if kind == 'max' and isinstance(f, Or):
            return self._operands(f.left, t, kind) + self._operands(f.right, t, kind)
        if kind == 'min' and isinstance(f, Always):
            return [op for k in self._window(f, t) for op in self._operands(f.child, k, kind)]
        if kind == 'max' and isinstance(f, Eventually):
            return [op for k in self._window(f, t) for op in self._operands(f.child, k, kind)]
        return [(f, t)]

    def bounds(self, f, t):
        """Interval bounds of the robustness of an NNF formula."""
        key = (f, t)
        if key in self._bounds:
            return self._bounds[key]
        if key in self.cache:
            result = self.model.expr_bounds(self.cache[key])
        elif isinstance(f, TrueFormula):
            result = (math.inf, math.inf)
        elif is_false(f):
            result = (-math.inf, -math.inf)
        elif isinstance(f, Pred):
            result = self.model.expr_bounds(self.predicate_expr(f.predicate, t))
        else:
            kind = 'min' if isinstance(f, (And, Always)) else 'max'
            parts = [self.bounds(g, k) for g, k in self._operands(f, t, kind)]
            pick = min if kind == 'min' else max
            result = (pick(p[0] for p in parts), pick(p[1] for p in parts))
        self._bounds[key] = result
        return result

    def encode(self, f, t):
        """LinExpr equal to the robustness of NNF formula f at index t."""
        key = (f, t)
        if key in self.cache:
            return self.cache[key]
        if isinstance(f, TrueFormula) or is_false(f):
            raise EncodingError("robustness of a constant true/false formula is infinite")
        if isinstance(f, Pred):
            expr = self.predicate_expr(f.predicate, t)
        elif isinstance(f, Not):
            raise EncodingError("formula must be in negation normal form")
        else:
            kind = 'min' if isinstance(f, (And, Always)) else 'max'
            operands = []
            for g, k in self._operands(f, t, kind):
                if isinstance(g, TrueFormula):
                    if kind == 'max':
                        raise EncodingError("disjunction with true has infinite robustness")
                    continue
                if is_false(g):
                    if kind == 'min':
                        raise EncodingError("conjunction with false has infinite robustness")
                    continue
                operands.append(self.encode(g, k))
            if not operands:
                raise EncodingError("robustness of a constant formula is infinite")
            expr = _extremum(self.model, operands, self.cfg, kind, self._name(f"r{kind}"))
        self.cache[key] = expr
        return expr

    def constrain(self, f, t, lower):
        """Add constraints equivalent to robustness(f, t) >= lower for NNF f."""
        m = self.model
        lower = LinExpr.of(lower)
        key = (f, t)
        if key in self.cache:
            m.add_constraint(self.cache[key] - lower, '>=', 0.0)
            return
        if isinstance(f, TrueFormula):
            return
        if is_false(f):
            m.add_constraint(LinExpr(), '>=', 1.0, self._name('false'))
            return
        if isinstance(f, Pred):
            m.add_constraint(self.predicate_expr(f.predicate, t) - lower, '>=', 0.0)
            return
        if isinstance(f, (And, Always)):
            for g, k in self._operands(f, t, 'min'):
                self.constrain(g, k, lower)
            return
        operands = [(g, k) for g, k in self._operands(f, t, 'max') if not is_false(g)]
        if any(isinstance(g, TrueFormula) for g, _ in operands):
            return
        low_l, high_l = m.expr_bounds(lower)
        bounds = [self.bounds(g, k) for g, k in operands]
        if any(lo >= high_l for lo, _ in bounds):
            return
        live = [(op, b) for op, b in zip(operands, bounds) if b[1] >= low_l]
        if not live:
            m.add_constraint(LinExpr(), '>=', 1.0, self._name('unreachable'))
            return
        if len(live) == 1:
            (g, k), _ = live[0]
            self.constrain(g, k, lower)
            return
        name = self._name('sel')
        selectors = []
        for i, ((g, k), (lo, _)) in enumerate(live):
            z = m.add_binary(f"{name}_z{i}")
            selectors.append(z)
            M = _big_m(high_l - lo, self.cfg, name)
            # rho_i >= lower - M (1 - z)
            self.constrain(g, k, lower - M + M * z)
        m.add_constraint(sum(selectors, LinExpr()), '==', 1.0, f"{name}_one")


def encode_robustness(m, f, signals, grid, t_index=0, cfg=None, encoder=None):
    """Variable constrained to equal the robustness of f at t_index."""
    encoder = encoder or RobustnessEncoder(m, signals, grid, cfg)
    expr = encoder.encode(to_nnf(f), t_index)
    return as_var(m, expr, f"rho{len(m.vars)}")


def constrain_robustness(m, f, signals, grid, t_index=0, lower=0.0, cfg=None, encoder=None):
    encoder = encoder or RobustnessEncoder(m, signals, grid, cfg)
    encoder.constrain(to_nnf(f), t_index, lower)
    return encoder
