"""
Dense two-phase tableau simplex for small linear programs.

    minimize    c @ x
    subject to  A_ub @ x <= b_ub
                A_eq @ x == b_eq
                lower <= x <= upper      (infinite bounds allowed)

Dantzig pricing, switching to Bland's rule after 5 * (rows + columns)
iterations so degenerate problems cannot cycle. Ratio-test ties go to the
lowest basic column index.
"""
import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

PIVOT_TOL = 1e-9
ZERO_TOL = 1e-12


@dataclass
class LpResult:
    status: str          # optimal | infeasible | unbounded | iteration_limit
    x: np.ndarray = None
    fun: float = None
    iterations: int = 0


def _as_matrix(A, n):
    if A is None:
        return np.zeros((0, n))
    A = np.asarray(A, dtype=float)
    return A.reshape(-1, n)


def _as_vector(b, m):
    if b is None:
        return np.zeros(m)
    return np.asarray(b, dtype=float).reshape(m)


class _Tableau:
    """Tableau with the reduced-cost row last and the right-hand side last column."""

    def __init__(self, table, basis):
        self.T = table
        self.basis = basis
        self.iterations = 0

    @property
    def m(self):
        return self.T.shape[0] - 1

    def pivot(self, row, col):
        T = self.T
        T[row] /= T[row, col]
        column = T[:, col].copy()
        column[row] = 0.0
        T -= np.outer(column, T[row])
        T[np.abs(T) < ZERO_TOL] = 0.0
        self.basis[row] = col
        self.iterations += 1

    def run(self, allowed, max_iter, bland_after, tol):
        """Iterate to optimality over the columns flagged in ``allowed``."""
        T = self.T
        local = 0
        while True:
            if self.iterations >= max_iter:
                return 'iteration_limit'
            reduced = np.where(allowed, T[-1, :-1], 0.0)
            if local >= bland_after:
                candidates = np.flatnonzero(reduced < -tol)
                if candidates.size == 0:
                    return 'optimal'
                col = int(candidates[0])
            else:
                col = int(np.argmin(reduced))
                if reduced[col] >= -tol:
                    return 'optimal'
            column = T[:-1, col]
            positive = np.flatnonzero(column > PIVOT_TOL)
            if positive.size == 0:
                return 'unbounded'
            ratios = T[positive, -1] / column[positive]
            best = ratios.min()
            ties = positive[ratios <= best + ZERO_TOL * (1.0 + abs(best))]
            row = int(min(ties, key=lambda r: self.basis[r]))
            self.pivot(row, col)
            local += 1


def solve_lp(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, lower=None, upper=None,
             feas_tol=1e-6, opt_tol=1e-9, max_iter=None):
    c = np.asarray(c, dtype=float).ravel()
    n = c.size
    A_ub = _as_matrix(A_ub, n)
    b_ub = _as_vector(b_ub, A_ub.shape[0])
    A_eq = _as_matrix(A_eq, n)
    b_eq = _as_vector(b_eq, A_eq.shape[0])
    lower = np.full(n, 0.0) if lower is None else np.asarray(lower, dtype=float)
    upper = np.full(n, np.inf) if upper is None else np.asarray(upper, dtype=float)

    if np.any(lower > upper + feas_tol):
        return LpResult('infeasible')

    # x = shift + M @ y with y >= 0; finite boxes add rows y_j <= ub - lb
    shift = np.zeros(n)
    columns = []
    box_rows = []
    for j in range(n):
        lo, hi = lower[j], upper[j]
        if np.isfinite(lo) and np.isfinite(hi) and hi - lo <= 0.0:
            shift[j] = lo
        elif np.isfinite(lo):
            shift[j] = lo
            columns.append((j, 1.0))
            if np.isfinite(hi):
                box_rows.append((len(columns) - 1, hi - lo))
        elif np.isfinite(hi):
            shift[j] = hi
            columns.append((j, -1.0))
        else:
            columns.append((j, 1.0))
            columns.append((j, -1.0))
    N = len(columns)
    M = np.zeros((n, N))
    for k, (j, sign) in enumerate(columns):
        M[j, k] = sign

    ub_rows = A_ub @ M
    ub_rhs = b_ub - A_ub @ shift
    eq_rows = A_eq @ M
    eq_rhs = b_eq - A_eq @ shift
    m_ub = ub_rows.shape[0] + len(box_rows)
    m_eq = eq_rows.shape[0]
    m = m_ub + m_eq

    rows = np.zeros((m, N + m_ub))
    rhs = np.zeros(m)
    rows[:ub_rows.shape[0], :N] = ub_rows
    rhs[:ub_rows.shape[0]] = ub_rhs
    for i, (k, width) in enumerate(box_rows):
        r = ub_rows.shape[0] + i
        rows[r, k] = 1.0
        rhs[r] = width
    rows[:m_ub, N:N + m_ub] = np.eye(m_ub)
    rows[m_ub:, :N] = eq_rows
    rhs[m_ub:] = eq_rhs

    negative = rhs < 0
    rows[negative] *= -1.0
    rhs[negative] *= -1.0

    # slack columns usable as the starting basis; everything else gets an artificial
    basis = [-1] * m
    for i in range(m_ub):
        if not negative[i]:
            basis[i] = N + i
    needs_art = [i for i in range(m) if basis[i] < 0]
    n_struct = N + m_ub
    n_cols = n_struct + len(needs_art)
    table = np.zeros((m + 1, n_cols + 1))
    table[:m, :n_struct] = rows
    table[:m, -1] = rhs
    for k, i in enumerate(needs_art):
        table[i, n_struct + k] = 1.0
        basis[i] = n_struct + k

    if max_iter is None:
        max_iter = 50 * (m + n_cols) + 1000
    bland_after = 5 * (m + n_cols)
    tab = _Tableau(table, basis)

    if needs_art:
        for i in needs_art:
            table[-1, :n_struct] -= table[i, :n_struct]
            table[-1, -1] -= table[i, -1]
        allowed = np.ones(n_cols, dtype=bool)
        status = tab.run(allowed, max_iter, bland_after, opt_tol)
        if status == 'iteration_limit':
            return LpResult(status, iterations=tab.iterations)
        if -tab.T[-1, -1] > feas_tol:
            return LpResult('infeasible', iterations=tab.iterations)
        # drive remaining artificials out; rows that cannot pivot are redundant
        redundant = []
        for i in range(tab.m):
            if tab.basis[i] >= n_struct:
                candidates = np.flatnonzero(np.abs(tab.T[i, :n_struct]) > PIVOT_TOL)
                if candidates.size:
                    tab.pivot(i, int(candidates[0]))
                else:
                    redundant.append(i)
        if redundant:
            keep = [i for i in range(tab.m) if i not in redundant]
            tab.T = np.vstack([tab.T[keep], tab.T[-1:]])
            tab.basis = [tab.basis[i] for i in keep]
        tab.T = np.hstack([tab.T[:, :n_struct], tab.T[:, -1:]])

    # phase two objective in y-space
    cost = np.zeros(n_struct)
    cost[:N] = c @ M
    T = tab.T
    T[-1, :] = 0.0
    T[-1, :n_struct] = cost
    for i, col in enumerate(tab.basis):
        if cost[col] != 0.0:
            T[-1] -= cost[col] * T[i]
    allowed = np.ones(n_struct, dtype=bool)
    status = tab.run(allowed, max_iter, bland_after, opt_tol)
    if status != 'optimal':
        return LpResult(status, iterations=tab.iterations)

    y = np.zeros(n_struct)
    for i, col in enumerate(tab.basis):
        y[col] = tab.T[i, -1]
    x = shift + M @ y[:N]
    x = np.clip(x, lower, upper)
    return LpResult('optimal', x, float(c @ x), tab.iterations)


def solve_lp_highs(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, lower=None, upper=None,
                   feas_tol=1e-6, opt_tol=1e-9, max_iter=None):
    """Same contract as solve_lp, delegated to SciPy's HiGHS."""
    from scipy.optimize import linprog

    c = np.asarray(c, dtype=float).ravel()
    n = c.size
    lower = np.full(n, 0.0) if lower is None else np.asarray(lower, dtype=float)
    upper = np.full(n, np.inf) if upper is None else np.asarray(upper, dtype=float)
    bounds = [(None if not np.isfinite(lo) else lo, None if not np.isfinite(hi) else hi)
              for lo, hi in zip(lower, upper)]
    A_ub = _as_matrix(A_ub, n)
    A_eq = _as_matrix(A_eq, n)
    rows = dict(A_ub=A_ub if A_ub.size else None, b_ub=_as_vector(b_ub, A_ub.shape[0]) if A_ub.size else None,
                A_eq=A_eq if A_eq.size else None, b_eq=_as_vector(b_eq, A_eq.shape[0]) if A_eq.size else None,
                bounds=bounds, method='highs',
                options={'primal_feasibility_tolerance': min(feas_tol, 1e-7),
                         'dual_feasibility_tolerance': 1e-9})
    res = linprog(c, **rows)
    if res.status == 4 and 'unbounded or infeasible' in res.message.lower():
        # presolve could not tell the two apart; a zero objective settles feasibility
        feasibility = linprog(np.zeros(n), **rows)
        if feasibility.status in (0, 2):
            return LpResult('unbounded' if feasibility.status == 0 else 'infeasible')
    if res.status == 0:
        x = np.clip(res.x, lower, upper)
        return LpResult('optimal', x, float(c @ x), int(getattr(res, 'nit', 0)))
    if res.status == 2:
        return LpResult('infeasible')
    if res.status == 3:
        return LpResult('unbounded')
    logger.warning(f"HiGHS returned status {res.status}: {res.message}")
    return LpResult('iteration_limit')


LP_BACKENDS = {
    'simplex': solve_lp,
    'highs': solve_lp_highs,
}
