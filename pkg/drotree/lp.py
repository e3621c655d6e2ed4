import math

import numpy as np
from absl import logging

from drotree.errors import NumericalBreakdown, ValidationError

PIVOT_TOL = 1e-9
BREAKDOWN_TOL = 1e-11
FEAS_TOL = 1e-7
# residual accepted on the final primal before the solve is declared broken
RESIDUAL_TOL = 1e-6

OPTIMAL = "Optimal"
INFEASIBLE = "Infeasible"
UNBOUNDED = "Unbounded"

_SENSES = {"<=": "<=", ">=": ">=", "=": "=", "==": "="}
_FLIP = {"<=": ">=", ">=": "<=", "=": "="}


class LinearProgram:
    """Dense minimization LP: min c.x s.t. rows, lower <= x <= upper."""

    def __init__(self, objective=None, rows=None, bounds=None, name="lp"):
        self.name = name
        self.objective = []
        self.lower = []
        self.upper = []
        self.var_names = []
        self.rows = []
        self.row_names = []
        for j, c in enumerate(objective or []):
            lo, hi = bounds[j] if bounds is not None else (0.0, math.inf)
            self.add_var(c, lo, hi)
        for row in rows or []:
            self.add_row(*row)

    @property
    def n_vars(self):
        return len(self.objective)

    @property
    def n_rows(self):
        return len(self.rows)

    def add_var(self, cost=0.0, lower=0.0, upper=math.inf, name=None):
        self.objective.append(float(cost))
        self.lower.append(-math.inf if lower is None else float(lower))
        self.upper.append(math.inf if upper is None else float(upper))
        self.var_names.append(name or f"x{len(self.objective) - 1}")
        return len(self.objective) - 1

    def add_row(self, coefs, sense, rhs, name=None):
        if sense not in _SENSES:
            raise ValidationError(f"unknown row sense {sense!r}", rule="sense")
        items = coefs.items() if isinstance(coefs, dict) else coefs
        row = {}
        for j, a in items:
            a = float(a)
            if a != 0.0:
                row[int(j)] = row.get(int(j), 0.0) + a
        self.rows.append((row, _SENSES[sense], float(rhs)))
        self.row_names.append(name or f"r{len(self.rows) - 1}")
        return len(self.rows) - 1

    def validate(self):
        n = self.n_vars
        for i, (row, sense, rhs) in enumerate(self.rows):
            if any(j < 0 or j >= n for j in row):
                raise ValidationError(f"row {self.row_names[i]} indexes past {n} variables", rule="index")
            if not math.isfinite(rhs):
                raise ValidationError(f"row {self.row_names[i]} has non-finite rhs", rule="rhs")
            if not all(math.isfinite(a) for a in row.values()):
                raise ValidationError(f"row {self.row_names[i]} has non-finite entries", rule="coef")
        for j in range(n):
            lo, hi = self.lower[j], self.upper[j]
            if lo > hi or lo == math.inf or hi == -math.inf:
                raise ValidationError(f"variable {self.var_names[j]} has bounds [{lo}, {hi}]", rule="bounds")
            if not math.isfinite(self.objective[j]):
                raise ValidationError(f"variable {self.var_names[j]} has non-finite cost", rule="cost")

    def dense(self):
        m, n = self.n_rows, self.n_vars
        A = np.zeros((m, n))
        b = np.zeros(m)
        senses = []
        for i, (row, sense, rhs) in enumerate(self.rows):
            for j, a in row.items():
                A[i, j] = a
            b[i] = rhs
            senses.append(sense)
        return (
            np.array(self.objective, dtype=float),
            A,
            senses,
            b,
            np.array(self.lower, dtype=float),
            np.array(self.upper, dtype=float),
        )

    def __repr__(self):
        return f"LinearProgram({self.name}, vars={self.n_vars}, rows={self.n_rows})"


class LpSolution:
    def __init__(self, status, objective_value=math.nan, primal=None, duals=None, iterations=0):
        self.status = status
        self.objective_value = objective_value
        self.primal = primal
        self.duals = duals
        self.iterations = iterations

    @property
    def optimal(self):
        return self.status == OPTIMAL

    def __repr__(self):
        return f"LpSolution({self.status}, {self.objective_value})"


def solve_lp(lp, v=False):
    """Two-phase dense tableau simplex.

    Dantzig pricing for the first 10*(rows+cols) pivots of a phase, then
    Bland's rule. Ratio-test ties go to the smallest basic column index.

    Args:
        lp (LinearProgram): Problem to solve.
        v (bool, optional): Log phase summaries. Defaults to False.

    Returns:
        LpSolution: Status, primal point, row duals (>= rows carry
        nonnegative duals) and objective value.
    """
    lp.validate()
    c, A, senses, b, lower, upper = lp.dense()
    m, n = A.shape

    # x = x0 + M y with y >= 0
    x0 = np.zeros(n)
    map_cols = []
    bound_rows = []
    for j in range(n):
        lo, hi = lower[j], upper[j]
        if math.isfinite(lo):
            x0[j] = lo
            map_cols.append((j, 1.0))
            if math.isfinite(hi):
                bound_rows.append((len(map_cols) - 1, hi - lo))
        elif math.isfinite(hi):
            x0[j] = hi
            map_cols.append((j, -1.0))
        else:
            map_cols.append((j, 1.0))
            map_cols.append((j, -1.0))
    ny = len(map_cols)
    M = np.zeros((n, ny))
    for k, (j, s) in enumerate(map_cols):
        M[j, k] = s

    A_y = A @ M
    b_y = b - A @ x0
    c_y = M.T @ c
    rows_A = [A_y]
    rows_b = [b_y]
    row_senses = list(senses)
    if bound_rows:
        B_rows = np.zeros((len(bound_rows), ny))
        for r, (k, width) in enumerate(bound_rows):
            B_rows[r, k] = 1.0
        rows_A.append(B_rows)
        rows_b.append(np.array([w for _, w in bound_rows]))
        row_senses += ["<="] * len(bound_rows)
    A_std = np.vstack(rows_A) if rows_A else np.zeros((0, ny))
    b_std = np.concatenate(rows_b) if rows_b else np.zeros(0)
    n_all = A_std.shape[0]

    flip = np.ones(n_all)
    for i in range(n_all):
        if b_std[i] < 0:
            A_std[i] *= -1.0
            b_std[i] *= -1.0
            row_senses[i] = _FLIP[row_senses[i]]
            flip[i] = -1.0

    # slack / surplus / artificial columns
    extra = []
    basis = np.zeros(n_all, dtype=int)
    art_cols = []
    n_cols = ny
    for i, sense in enumerate(row_senses):
        if sense == "<=":
            extra.append((i, 1.0))
            basis[i] = n_cols
            n_cols += 1
        elif sense == ">=":
            extra.append((i, -1.0))
            n_cols += 1
            extra.append((i, 1.0))
            basis[i] = n_cols
            art_cols.append(n_cols)
            n_cols += 1
        else:
            extra.append((i, 1.0))
            basis[i] = n_cols
            art_cols.append(n_cols)
            n_cols += 1
    E = np.zeros((n_all, n_cols - ny))
    for k, (i, s) in enumerate(extra):
        E[i, k] = s
    A_full = np.hstack([A_std, E])
    is_art = np.zeros(n_cols, dtype=bool)
    is_art[art_cols] = True

    tableau = np.hstack([A_full, b_std[:, None]])
    kept_rows = np.arange(n_all)
    iterations = 0
    scale_b = max(1.0, float(np.max(np.abs(b_std), initial=0.0)))

    if art_cols:
        cost1 = is_art.astype(float)
        status, its = _simplex(tableau, basis, cost1, np.ones(n_cols, dtype=bool))
        iterations += its
        infeas = float(cost1[basis] @ tableau[:, -1])
        if v:
            logging.info("%s phase I: %d pivots, infeasibility %.3g", lp.name, its, infeas)
        if infeas > FEAS_TOL * scale_b:
            return LpSolution(INFEASIBLE, math.nan, iterations=iterations)
        tableau, basis, kept_rows = _drive_out_artificials(tableau, basis, is_art, kept_rows)

    cost2 = np.zeros(n_cols)
    cost2[:ny] = c_y
    status, its = _simplex(tableau, basis, cost2, ~is_art)
    iterations += its
    if v:
        logging.info("%s phase II: %d pivots, status %s", lp.name, its, status)
    if status == UNBOUNDED:
        return LpSolution(UNBOUNDED, -math.inf, iterations=iterations)

    # refine the basic solution and duals against the unpivoted data
    A_kept = A_full[kept_rows]
    b_kept = b_std[kept_rows]
    B = A_kept[:, basis]
    z = np.zeros(n_cols)
    y_std = np.zeros(len(kept_rows))
    if len(kept_rows):
        try:
            z[basis] = np.linalg.solve(B, b_kept)
            y_std = np.linalg.solve(B.T, cost2[basis])
        except np.linalg.LinAlgError:
            z[basis] = tableau[:, -1]
            y_std = _duals_from_tableau(B, cost2[basis])
    z[np.abs(z) < BREAKDOWN_TOL] = 0.0
    z = np.maximum(z, 0.0)

    y = z[:ny]
    x = x0 + M @ y
    residual = _max_residual(A, senses, b, lower, upper, x)
    if residual > RESIDUAL_TOL:
        raise NumericalBreakdown(f"{lp.name}: primal residual {residual:.3g} after refinement")

    duals = np.zeros(m)
    for pos, i in enumerate(kept_rows):
        if i < m:
            duals[i] = flip[i] * y_std[pos]
    objective = float(c @ x)
    return LpSolution(OPTIMAL, objective, x, duals, iterations)


def _simplex(tableau, basis, cost, allowed):
    """Pivots `tableau` in place to optimality for `cost`; returns (status, pivots)."""
    n_rows, width = tableau.shape
    n_cols = width - 1
    bland_after = 10 * (n_rows + n_cols)
    cap = 50 * (n_rows + n_cols) + 1000
    its = 0
    while True:
        reduced = cost - cost[basis] @ tableau[:, :n_cols]
        candidates = np.flatnonzero(allowed & (reduced < -PIVOT_TOL))
        if candidates.size == 0:
            return OPTIMAL, its
        if its < bland_after:
            enter = int(candidates[np.argmin(reduced[candidates])])
        else:
            enter = int(candidates[0])
        col = tableau[:, enter]
        rows = np.flatnonzero(col > PIVOT_TOL)
        if rows.size == 0:
            return UNBOUNDED, its
        ratios = tableau[rows, -1] / col[rows]
        best = ratios.min()
        ties = rows[ratios <= best + 1e-12 * max(1.0, abs(best))]
        leave = int(ties[np.argmin(basis[ties])])
        _pivot(tableau, leave, enter)
        basis[leave] = enter
        rhs = tableau[:, -1]
        rhs[(rhs < 0.0) & (rhs > -FEAS_TOL)] = 0.0
        its += 1
        if its > cap:
            raise NumericalBreakdown(f"simplex exceeded {cap} pivots")


def _pivot(tableau, r, e):
    piv = tableau[r, e]
    if abs(piv) < BREAKDOWN_TOL:
        raise NumericalBreakdown(f"pivot magnitude {abs(piv):.3g} below {BREAKDOWN_TOL}")
    prow = tableau[r] / piv
    colv = tableau[:, e].copy()
    colv[r] = 0.0
    tableau -= np.outer(colv, prow)
    tableau[r] = prow
    tableau[:, e] = 0.0
    tableau[r, e] = 1.0


def _drive_out_artificials(tableau, basis, is_art, kept_rows):
    r = 0
    while r < tableau.shape[0]:
        if not is_art[basis[r]]:
            r += 1
            continue
        row = np.abs(tableau[r, :-1])
        row[is_art] = 0.0
        j = int(np.argmax(row)) if row.size else 0
        if row.size and row[j] > PIVOT_TOL:
            _pivot(tableau, r, j)
            basis[r] = j
            r += 1
        else:
            # redundant row
            tableau = np.delete(tableau, r, axis=0)
            basis = np.delete(basis, r)
            kept_rows = np.delete(kept_rows, r)
    return tableau, basis, kept_rows


def _duals_from_tableau(B, c_b):
    return np.linalg.lstsq(B.T, c_b, rcond=None)[0]


def _max_residual(A, senses, b, lower, upper, x):
    worst = 0.0
    if A.shape[0]:
        lhs = A @ x
        for i, sense in enumerate(senses):
            scale = max(1.0, abs(b[i]))
            if sense == "<=":
                gap = lhs[i] - b[i]
            elif sense == ">=":
                gap = b[i] - lhs[i]
            else:
                gap = abs(lhs[i] - b[i])
            worst = max(worst, gap / scale)
    with np.errstate(invalid="ignore"):
        worst = max(worst, float(np.max(lower - x, initial=0.0)), float(np.max(x - upper, initial=0.0)))
    return worst


def to_lp_text(lp):
    """Renders the LP in CPLEX-LP format for manual inspection."""
    names = lp.var_names

    def expr(coefs):
        if not coefs:
            return f"0 {names[0]}" if names else "0"
        text = " ".join(f"{'-' if a < 0 else '+'} {format(abs(a), '.17g')} {names[j]}" for j, a in coefs)
        return text[2:] if text.startswith("+ ") else text

    lines = [f"\\ {lp.name}", "Minimize", " obj: " + expr([(j, c) for j, c in enumerate(lp.objective) if c != 0.0])]
    lines.append("Subject To")
    ops = {"<=": "<=", ">=": ">=", "=": "="}
    for i, (row, sense, rhs) in enumerate(lp.rows):
        lines.append(f" {lp.row_names[i]}: {expr(sorted(row.items()))} {ops[sense]} {format(rhs, '.17g')}")
    lines.append("Bounds")
    for j in range(lp.n_vars):
        lo, hi = lp.lower[j], lp.upper[j]
        if lo == -math.inf and hi == math.inf:
            lines.append(f" {names[j]} free")
        elif hi == math.inf:
            lines.append(f" {names[j]} >= {format(lo, '.17g')}")
        elif lo == -math.inf:
            lines.append(f" -inf <= {names[j]} <= {format(hi, '.17g')}")
        else:
            lines.append(f" {format(lo, '.17g')} <= {names[j]} <= {format(hi, '.17g')}")
    lines.append("End")
    return "\n".join(lines) + "\n"
