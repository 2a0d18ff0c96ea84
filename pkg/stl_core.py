#!/usr/bin/env python3
"""
Signal temporal logic core.

Formula AST, a small text grammar (parser and printer), negation normal form,
and the discrete-time robustness monitor over uniformly sampled traces.

Grammar:
    formula := disj
    disj    := conj ("or" conj)*
    conj    := term ("and" term)*
    term    := "not" term
             | "G[" num "," num "]" "(" formula ")"
             | "F[" num "," num "]" "(" formula ")"
             | "(" formula ")"
             | "true"
             | "linf" "(" linexpr "," linexpr ")" ">=" num
             | "inbox" "(" linexpr "," linexpr "," num "," num "," num "," num ")"
             | linexpr (">=" | "<=") num
    linexpr := ["+"|"-"] lterm (("+"|"-") lterm)*
    lterm   := num ["*" ident] | ident

"and" binds tighter than "or"; both fold to the left.
"""
import csv
import logging
import math
import re
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

# Interval endpoints within this many samples of a grid point count as on-grid
GRID_SNAP = 1e-9


class StlError(Exception):
    """Evaluation-time problem: unknown dimension, bad index"""


class HorizonError(StlError):
    """Temporal operator whose clipped index set is empty"""


class TraceError(StlError):
    """Malformed trace data or trace file"""


class ParseError(StlError):
    def __init__(self, message, position, expected=None):
        self.position = position
        self.expected = expected
        detail = f"{message} at position {position}"
        if expected:
            detail += f" (expected {expected})"
        super().__init__(detail)


# ---------------------------------------------------------------------------
# Time grid and traces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeGrid:
    dt: float
    steps: int

    def __post_init__(self):
        if not (self.dt > 0) or not math.isfinite(self.dt):
            raise StlError(f"time grid dt must be positive, got {self.dt}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise StlError(f"time grid needs at least one sample, got {self.steps}")

    @property
    def horizon(self):
        return (self.steps - 1) * self.dt

    def time(self, k):
        return k * self.dt

    def times(self):
        return [k * self.dt for k in range(self.steps)]


class Trace:
    """Sampled vector signal: ``values[k, j]`` is dimension ``dims[j]`` at sample k."""

    def __init__(self, grid, dims, values):
        dims = tuple(dims)
        if len(set(dims)) != len(dims):
            raise TraceError(f"duplicate dimension names in {dims}")
        values = np.array(values, dtype=float)
        if values.ndim == 1 and len(dims) == 1:
            values = values.reshape(-1, 1)
        if values.ndim != 2 or values.shape != (grid.steps, len(dims)):
            raise TraceError(
                f"trace values have shape {values.shape}, expected ({grid.steps}, {len(dims)})")
        values.setflags(write=False)
        self.grid = grid
        self.dims = dims
        self.values = values
        self._index = {name: j for j, name in enumerate(dims)}

    @classmethod
    def from_columns(cls, grid, columns):
        dims = list(columns)
        values = np.column_stack([np.asarray(columns[d], dtype=float) for d in dims]) \
            if dims else np.zeros((grid.steps, 0))
        return cls(grid, dims, values)

    def has(self, name):
        return name in self._index

    def column(self, name):
        try:
            return self.values[:, self._index[name]]
        except KeyError:
            raise StlError(f"unknown dimension '{name}' (trace has {', '.join(self.dims)})")

    def value(self, name, k):
        return float(self.column(name)[k])

    def __eq__(self, other):
        if not isinstance(other, Trace):
            return NotImplemented
        return (self.grid == other.grid and self.dims == other.dims
                and np.array_equal(self.values, other.values))

    def __repr__(self):
        return f"Trace(dt={self.grid.dt}, steps={self.grid.steps}, dims={self.dims})"


# ---------------------------------------------------------------------------
# Formula AST
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Interval:
    a: float
    b: float

    def __post_init__(self):
        if not (math.isfinite(self.a) and math.isfinite(self.b)):
            raise StlError(f"interval bounds must be finite, got [{self.a}, {self.b}]")
        if self.a < 0:
            raise StlError(f"interval lower bound must be non-negative, got {self.a}")
        if self.a > self.b:
            raise StlError(f"interval with a > b: [{self.a}, {self.b}]")


@dataclass(frozen=True)
class Predicate:
    """Affine predicate l(S(t)) = sum(coeff * S[dim](t)) + offset >= 0."""
    coeffs: tuple
    offset: float = 0.0
    constant: bool = False

    def __post_init__(self):
        coeffs = tuple((str(name), float(c)) for name, c in self.coeffs)
        object.__setattr__(self, 'coeffs', coeffs)
        object.__setattr__(self, 'offset', float(self.offset))
        for name, c in coeffs:
            if not math.isfinite(c):
                raise StlError(f"non-finite coefficient for '{name}'")
        if not math.isfinite(self.offset):
            raise StlError("non-finite predicate offset")
        if not any(c != 0.0 for _, c in coeffs) and not self.constant:
            object.__setattr__(self, 'constant', True)

    @classmethod
    def of(cls, offset=0.0, **coeffs):
        return cls(tuple(coeffs.items()), offset)

    def dims(self):
        return {name for name, _ in self.coeffs}

    def negated(self):
        return Predicate(tuple((n, -c) for n, c in self.coeffs), -self.offset, self.constant)

    def evaluate(self, row):
        """Value of l at one sample; ``row`` maps dimension name to value."""
        return math.fsum([c * row(name) for name, c in self.coeffs] + [self.offset])


class Formula:
    """Base of the AST variants."""

    def children(self):
        return ()

    def dims(self):
        found = set()
        for child in self.children():
            found |= child.dims()
        return found

    def depth(self):
        kids = self.children()
        return 1 + (max(k.depth() for k in kids) if kids else 0)

    def __str__(self):
        return format_formula(self)


@dataclass(frozen=True)
class TrueFormula(Formula):
    pass


@dataclass(frozen=True)
class Pred(Formula):
    predicate: Predicate

    def dims(self):
        return self.predicate.dims()


@dataclass(frozen=True)
class Not(Formula):
    child: Formula

    def children(self):
        return (self.child,)


@dataclass(frozen=True)
class And(Formula):
    left: Formula
    right: Formula

    def children(self):
        return (self.left, self.right)


@dataclass(frozen=True)
class Or(Formula):
    left: Formula
    right: Formula

    def children(self):
        return (self.left, self.right)


@dataclass(frozen=True)
class Eventually(Formula):
    interval: Interval
    child: Formula

    def children(self):
        return (self.child,)


@dataclass(frozen=True)
class Always(Formula):
    interval: Interval
    child: Formula

    def children(self):
        return (self.child,)


def conjunction(formulas):
    formulas = list(formulas)
    if not formulas:
        return TrueFormula()
    result = formulas[0]
    for f in formulas[1:]:
        result = And(result, f)
    return result


def disjunction(formulas):
    formulas = list(formulas)
    if not formulas:
        return Not(TrueFormula())
    result = formulas[0]
    for f in formulas[1:]:
        result = Or(result, f)
    return result


def is_false(f):
    return isinstance(f, Not) and isinstance(f.child, TrueFormula)


def to_nnf(f, negate=False):
    """Negation normal form: negations end on predicates or on true."""
    if isinstance(f, TrueFormula):
        return Not(f) if negate else f
    if isinstance(f, Pred):
        return Pred(f.predicate.negated()) if negate else f
    if isinstance(f, Not):
        return to_nnf(f.child, not negate)
    if isinstance(f, And):
        cls = Or if negate else And
        return cls(to_nnf(f.left, negate), to_nnf(f.right, negate))
    if isinstance(f, Or):
        cls = And if negate else Or
        return cls(to_nnf(f.left, negate), to_nnf(f.right, negate))
    if isinstance(f, Always):
        cls = Eventually if negate else Always
        return cls(f.interval, to_nnf(f.child, negate))
    if isinstance(f, Eventually):
        cls = Always if negate else Eventually
        return cls(f.interval, to_nnf(f.child, negate))
    raise StlError(f"not a formula: {f!r}")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<temporal>[GF]\[)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>>=|<=|[()\[\],+\-*])
""", re.VERBOSE)

KEYWORDS = {'and', 'or', 'not', 'true', 'linf', 'inbox'}


def tokenize(text):
    tokens = []
    pos = 0
    while pos < len(text):
        match = _TOKEN_RE.match(text, pos)
        if not match:
            raise ParseError(f"unexpected character {text[pos]!r}", pos)
        kind = match.lastgroup
        if kind != 'ws':
            value = match.group(kind)
            if kind == 'ident' and value in KEYWORDS:
                kind = 'kw'
            tokens.append((kind, value, pos))
        pos = match.end()
    tokens.append(('eof', '', len(text)))
    return tokens


class _Parser:
    def __init__(self, text):
        self.tokens = tokenize(text)
        self.i = 0

    def _peek(self):
        return self.tokens[self.i]

    def _next(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def _at(self, kind, value=None):
        tok = self._peek()
        return tok[0] == kind and (value is None or tok[1] == value)

    def _consume(self, kind, value=None, expected=None):
        tok = self._peek()
        if tok[0] != kind or (value is not None and tok[1] != value):
            found = tok[1] if tok[0] != 'eof' else 'end of input'
            raise ParseError(f"unexpected {found!r}", tok[2], expected or repr(value or kind))
        return self._next()

    def parse(self):
        f = self._disj()
        if not self._at('eof'):
            tok = self._peek()
            raise ParseError(f"unexpected {tok[1]!r}", tok[2], "'and', 'or' or end of input")
        return f

    def _disj(self):
        left = self._conj()
        while self._at('kw', 'or'):
            self._next()
            left = Or(left, self._conj())
        return left

    def _conj(self):
        left = self._term()
        while self._at('kw', 'and'):
            self._next()
            left = And(left, self._term())
        return left

    def _term(self):
        tok = self._peek()
        if tok[0] == 'kw' and tok[1] == 'not':
            self._next()
            return Not(self._term())
        if tok[0] == 'temporal':
            self._next()
            a = self._number()
            self._consume('op', ',')
            b = self._number()
            self._consume('op', ']')
            if a > b:
                raise ParseError(f"interval with a > b: [{a}, {b}]", tok[2])
            if a < 0:
                raise ParseError(f"negative interval bound {a}", tok[2])
            self._consume('op', '(')
            body = self._disj()
            self._consume('op', ')')
            cls = Always if tok[1][0] == 'G' else Eventually
            return cls(Interval(a, b), body)
        if tok[0] == 'op' and tok[1] == '(':
            self._next()
            body = self._disj()
            self._consume('op', ')')
            return body
        if tok[0] == 'kw' and tok[1] == 'true':
            self._next()
            return TrueFormula()
        if tok[0] == 'kw' and tok[1] == 'linf':
            return self._linf()
        if tok[0] == 'kw' and tok[1] == 'inbox':
            return self._inbox()
        return self._atom()

    def _number(self):
        sign = 1.0
        while self._at('op', '-') or self._at('op', '+'):
            if self._next()[1] == '-':
                sign = -sign
        tok = self._consume('num', expected='number')
        return sign * float(tok[1])

    def _linexpr(self):
        """Returns (ordered coefficient dict, constant)."""
        coeffs = {}
        const = 0.0
        first = True
        while True:
            sign = 1.0
            if self._at('op', '+') or self._at('op', '-'):
                sign = -1.0 if self._next()[1] == '-' else 1.0
            elif not first:
                break
            tok = self._peek()
            if tok[0] == 'num':
                self._next()
                value = sign * float(tok[1])
                if self._at('op', '*'):
                    self._next()
                    name = self._consume('ident', expected='identifier')[1]
                    coeffs[name] = coeffs.get(name, 0.0) + value
                else:
                    const += value
            elif tok[0] == 'ident':
                self._next()
                coeffs[tok[1]] = coeffs.get(tok[1], 0.0) + sign
            else:
                found = tok[1] if tok[0] != 'eof' else 'end of input'
                raise ParseError(f"unexpected {found!r}", tok[2], 'number or identifier')
            first = False
        return coeffs, const

    def _atom(self):
        coeffs, const = self._linexpr()
        tok = self._peek()
        if tok[0] == 'op' and tok[1] in ('>=', '<='):
            self._next()
            rhs = self._number()
        else:
            found = tok[1] if tok[0] != 'eof' else 'end of input'
            raise ParseError(f"unexpected {found!r}", tok[2], "'>=' or '<='")
        if tok[1] == '>=':
            return Pred(Predicate(tuple(coeffs.items()), const - rhs))
        return Pred(Predicate(tuple((n, -c) for n, c in coeffs.items()), rhs - const))

    def _linf(self):
        self._next()
        self._consume('op', '(')
        first = self._linexpr()
        self._consume('op', ',')
        second = self._linexpr()
        self._consume('op', ')')
        self._consume('op', '>=')
        bound = self._number()
        sides = []
        for coeffs, const in (first, second):
            sides.append(Pred(Predicate(tuple(coeffs.items()), const - bound)))
            sides.append(Pred(Predicate(tuple((n, -c) for n, c in coeffs.items()), -const - bound)))
        return disjunction(sides)

    def _inbox(self):
        self._next()
        self._consume('op', '(')
        x = self._linexpr()
        self._consume('op', ',')
        y = self._linexpr()
        limits = []
        for _ in range(4):
            self._consume('op', ',')
            limits.append(self._number())
        self._consume('op', ')')
        x_lo, x_hi, y_lo, y_hi = limits
        sides = []
        for (coeffs, const), lo, hi in ((x, x_lo, x_hi), (y, y_lo, y_hi)):
            sides.append(Pred(Predicate(tuple(coeffs.items()), const - lo)))
            sides.append(Pred(Predicate(tuple((n, -c) for n, c in coeffs.items()), hi - const)))
        return conjunction(sides)


def parse_formula(text):
    return _Parser(text).parse()


# ---------------------------------------------------------------------------
# Printer
# ---------------------------------------------------------------------------

def _format_predicate(p):
    parts = []
    for name, c in p.coeffs:
        if not parts:
            parts.append(f"-{-c!r}*{name}" if c < 0 else f"{c!r}*{name}")
        else:
            parts.append(f"- {-c!r}*{name}" if c < 0 else f"+ {c!r}*{name}")
    lhs = ' '.join(parts) if parts else '0'
    rhs = -p.offset
    return f"{lhs} >= {rhs!r}"


def format_formula(f):
    """Canonical text form; parse_formula(format_formula(f)) == f."""
    def wrap(child):
        text = format_formula(child)
        return f"({text})" if isinstance(child, (And, Or)) else text

    if isinstance(f, TrueFormula):
        return 'true'
    if isinstance(f, Pred):
        return _format_predicate(f.predicate)
    if isinstance(f, Not):
        return f"not {wrap(f.child)}"
    if isinstance(f, And):
        return f"{wrap(f.left)} and {wrap(f.right)}"
    if isinstance(f, Or):
        return f"{wrap(f.left)} or {wrap(f.right)}"
    if isinstance(f, (Always, Eventually)):
        op = 'G' if isinstance(f, Always) else 'F'
        return f"{op}[{f.interval.a!r},{f.interval.b!r}]({format_formula(f.child)})"
    raise StlError(f"not a formula: {f!r}")


# ---------------------------------------------------------------------------
# Monitor
# ---------------------------------------------------------------------------

def interval_to_indices(iv, grid, t_index):
    """Sample indices k with t_index + ceil(a/dt) <= k <= t_index + floor(b/dt), clipped to the grid."""
    if not 0 <= t_index < grid.steps:
        raise StlError(f"time index {t_index} outside grid of {grid.steps} samples")
    lo = t_index + math.ceil(iv.a / grid.dt - GRID_SNAP)
    hi = t_index + math.floor(iv.b / grid.dt + GRID_SNAP)
    hi = min(hi, grid.steps - 1)
    return range(lo, hi + 1) if lo <= hi else range(lo, lo)


def empty_window_reason(iv, grid, t_index):
    """Why interval_to_indices came back empty, for error messages."""
    lo = math.ceil(iv.a / grid.dt - GRID_SNAP)
    hi = math.floor(iv.b / grid.dt + GRID_SNAP)
    if lo > hi:
        return f"[{iv.a},{iv.b}] falls between grid points (dt={grid.dt})"
    return (f"[{iv.a},{iv.b}] from index {t_index} starts beyond the last of "
            f"{grid.steps} samples")


def _window(f, trace, t_index):
    indices = interval_to_indices(f.interval, trace.grid, t_index)
    if len(indices) == 0:
        raise HorizonError(f"{'G' if isinstance(f, Always) else 'F'} at index {t_index} has no samples: "
                           f"{empty_window_reason(f.interval, trace.grid, t_index)}")
    return indices


def robustness(f, trace, t_index=0):
    if not 0 <= t_index < trace.grid.steps:
        raise StlError(f"time index {t_index} outside trace of {trace.grid.steps} samples")
    if isinstance(f, TrueFormula):
        return math.inf
    if isinstance(f, Pred):
        return f.predicate.evaluate(lambda name: trace.value(name, t_index))
    if isinstance(f, Not):
        return -robustness(f.child, trace, t_index)
    if isinstance(f, And):
        return min(robustness(f.left, trace, t_index), robustness(f.right, trace, t_index))
    if isinstance(f, Or):
        return max(robustness(f.left, trace, t_index), robustness(f.right, trace, t_index))
    if isinstance(f, Always):
        return min(robustness(f.child, trace, k) for k in _window(f, trace, t_index))
    if isinstance(f, Eventually):
        return max(robustness(f.child, trace, k) for k in _window(f, trace, t_index))
    raise StlError(f"not a formula: {f!r}")


def satisfies(f, trace, t_index=0):
    return robustness(f, trace, t_index) >= 0


def robustness_trace(f, trace):
    """Robustness at every sample from 0 until the first index whose windows run off the trace."""
    values = []
    for k in range(trace.grid.steps):
        try:
            values.append(robustness(f, trace, k))
        except HorizonError:
            break
    return values


# ---------------------------------------------------------------------------
# Trace files
# ---------------------------------------------------------------------------

def read_trace_csv(path, dt=None):
    """Load a trace CSV with header ``t,dim1,dim2,...``; dt comes from the first two rows."""
    try:
        with open(path, newline='') as f:
            rows = [row for row in csv.reader(f) if row]
    except OSError as e:
        raise TraceError(f"cannot read trace file {path}: {e}")
    if not rows or not rows[0] or rows[0][0].strip() != 't':
        raise TraceError(f"{path}: header must start with 't'")
    dims = [d.strip() for d in rows[0][1:]]
    try:
        data = [[float(cell) for cell in row] for row in rows[1:]]
    except ValueError as e:
        raise TraceError(f"{path}: non-numeric cell ({e})")
    if not data:
        raise TraceError(f"{path}: no samples")
    for n, row in enumerate(data):
        if len(row) != len(dims) + 1:
            raise TraceError(f"{path}: row {n + 1} has {len(row)} cells, expected {len(dims) + 1}")
    if len(data) >= 2:
        inferred = data[1][0] - data[0][0]
        if dt is None:
            dt = inferred
    if dt is None:
        raise TraceError(f"{path}: single-sample trace needs an explicit dt")
    t0 = data[0][0]
    for k, row in enumerate(data):
        if abs(row[0] - (t0 + k * dt)) > 1e-9:
            raise TraceError(f"{path}: non-uniform time column at row {k + 1} (t={row[0]}, dt={dt})")
    grid = TimeGrid(dt, len(data))
    values = np.array([row[1:] for row in data], dtype=float).reshape(len(data), len(dims))
    return Trace(grid, dims, values)


def write_trace_csv(trace, path):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['t', *trace.dims])
        for k in range(trace.grid.steps):
            writer.writerow([repr(trace.grid.time(k))] + [repr(float(v)) for v in trace.values[k]])
