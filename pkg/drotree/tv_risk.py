"""Total-variation ball arithmetic over one node's children.

All functions take a FiniteDist (children values h in canonical child order
and nominal conditional probabilities q) and are pure.
"""
import math

import numpy as np

from drotree.errors import ParamOutOfRange, ValidationError
from drotree.lp import LinearProgram, solve_lp

SUM_TOL = 1e-12
TV_TOL = 1e-10
# cumulative-mass slack for quantile lookups
QUANTILE_SLACK = 1e-12

C1, C2, C3, C4 = "C1", "C2", "C3", "C4"


def eq_tol(sup_level):
    return 1e-9 * max(1.0, abs(sup_level))


class FiniteDist:
    def __init__(self, values, probs):
        self.values = np.asarray(values, dtype=float).reshape(-1)
        self.probs = np.asarray(probs, dtype=float).reshape(-1)
        if self.values.size == 0 or self.values.size != self.probs.size:
            raise ValidationError("values and probs must have the same non-zero length", rule="dist_shape")
        if np.any(self.probs < 0.0):
            raise ValidationError("negative probability", rule="negative_q")
        if abs(float(self.probs.sum()) - 1.0) > SUM_TOL * max(1, self.probs.size):
            raise ValidationError(f"probabilities sum to {self.probs.sum()!r}", rule="probability_sum")

    def __len__(self):
        return self.values.size

    def __repr__(self):
        return f"FiniteDist(h={self.values.tolist()}, q={self.probs.tolist()})"


class WorstCaseResult:
    def __init__(self, value, dist, tight=True, feasible=True):
        self.value = value
        self.dist = dist
        self.tight = tight
        self.feasible = feasible

    def __repr__(self):
        if not self.feasible:
            return "WorstCaseResult(Infeasible)"
        return f"WorstCaseResult({self.value}, tight={self.tight})"


class PrimalCategories:
    def __init__(self, labels, var_level, sup_level, probs):
        self.labels = labels
        self.var_level = var_level
        self.sup_level = sup_level
        self._probs = probs

    def members(self, category):
        return [i for i, lab in enumerate(self.labels) if lab == category]

    def mass(self, category):
        return float(sum(self._probs[i] for i in self.members(category)))

    def __repr__(self):
        return f"PrimalCategories({self.labels}, VaR={self.var_level}, sup={self.sup_level})"


def psi(dist, eta):
    """Nominal mass of children with h <= eta."""
    tol = eq_tol(dist.values.max())
    return float(dist.probs[dist.values <= eta + tol].sum())


def var_level(dist, beta):
    """Left beta-quantile inf{eta : psi(eta) >= beta}."""
    _check_unit("beta", beta)
    h, q = dist.values, dist.probs
    if beta <= 0.0:
        return float(h.min())
    order = np.lexsort((np.arange(h.size), h))
    cum = 0.0
    for i in order:
        cum += q[i]
        if cum >= beta - QUANTILE_SLACK:
            return float(h[i])
    return float(h[q > 0].max())


def cvar(dist, alpha):
    """CVaR at level alpha; alpha=0 is the mean, alpha=1 the q-supported max."""
    _check_unit("alpha", alpha)
    h, q = dist.values, dist.probs
    if alpha <= 0.0:
        return float(q @ h)
    if alpha >= 1.0:
        return float(h[q > 0].max())
    v = var_level(dist, alpha)
    tol = eq_tol(h.max())
    tail = h > v + tol
    return ((psi(dist, v) - alpha) * v + float(q[tail] @ h[tail])) / (1.0 - alpha)


def worst_case_expectation(dist, gamma):
    """max p.h over the TV ball of radius gamma around q.

    The value is gamma*sup + (1-gamma)*CVaR_gamma with sup over every child.
    The returned maximizer moves min(gamma, 1 - q(argmax)) onto the first max
    child and drains it from the lowest-valued children upward.

    Args:
        dist (FiniteDist): Children values and nominal probabilities.
        gamma (float): Radius in [0, 1].

    Returns:
        WorstCaseResult: Value, one maximizer, and whether it is unique.
    """
    _check_unit("gamma", gamma)
    h, q = dist.values, dist.probs
    if gamma <= 0.0:
        return WorstCaseResult(float(q @ h), q.copy(), True)
    value = gamma * float(h.max()) + (1.0 - gamma) * cvar(dist, gamma)
    p, tight = _greedy_maximizer(h, q, gamma, ())
    return WorstCaseResult(value, p, tight)


def worst_case_expectation_restricted(dist, gamma, removed):
    """Worst case over the TV ball with p = 0 forced on `removed` child indices.

    Solved as an LP with |p - q| split into deviation variables. Returns an
    infeasible result (value +inf) when the removed nominal mass exceeds gamma
    or every child is removed.
    """
    _check_unit("gamma", gamma)
    h, q = dist.values, dist.probs
    n = h.size
    removed = sorted(set(int(i) for i in removed))
    if any(i < 0 or i >= n for i in removed):
        raise ParamOutOfRange(f"removed indices {removed} out of range for {n} children")
    m_removed = float(q[removed].sum()) if removed else 0.0
    if m_removed > gamma + TV_TOL or len(removed) == n:
        return WorstCaseResult(math.inf, None, True, feasible=False)

    lp = LinearProgram(name="tv_restricted")
    gone = set(removed)
    p_idx = [lp.add_var(-h[i], 0.0, 0.0 if i in gone else math.inf, name=f"p{i}") for i in range(n)]
    up = [lp.add_var(0.0, 0.0, math.inf, name=f"dp{i}") for i in range(n)]
    down = [lp.add_var(0.0, 0.0, math.inf, name=f"dm{i}") for i in range(n)]
    for i in range(n):
        lp.add_row({p_idx[i]: 1.0, up[i]: -1.0, down[i]: 1.0}, "=", q[i])
    lp.add_row({j: 1.0 for j in p_idx}, "=", 1.0)
    lp.add_row({**{j: 1.0 for j in up}, **{j: 1.0 for j in down}}, "<=", 2.0 * gamma)
    sol = solve_lp(lp)
    if not sol.optimal:
        return WorstCaseResult(math.inf, None, True, feasible=False)
    p = np.maximum(sol.primal[:n], 0.0)
    _, tight = _greedy_maximizer(h, q, gamma, removed)
    return WorstCaseResult(-sol.objective_value, p, tight)


def categorize(dist, gamma):
    """Splits children into C1 (below VaR), C2 (at VaR), C3 (between), C4 (at sup).

    C4 takes precedence when VaR equals sup.
    """
    _check_unit("gamma", gamma)
    h = dist.values
    sup = float(h.max())
    tol = eq_tol(sup)
    v = var_level(dist, gamma)
    labels = []
    for value in h:
        if abs(value - sup) <= tol:
            labels.append(C4)
        elif abs(value - v) <= tol:
            labels.append(C2)
        elif value < v:
            labels.append(C1)
        else:
            labels.append(C3)
    return PrimalCategories(labels, v, sup, dist.probs)


def tv_distance(p, q):
    return 0.5 * float(np.abs(np.asarray(p, dtype=float) - np.asarray(q, dtype=float)).sum())


def _greedy_maximizer(h, q, gamma, removed):
    n = h.size
    gone = set(removed)
    active = [i for i in range(n) if i not in gone]
    p = q.astype(float).copy()
    m_removed = float(sum(q[i] for i in gone))
    for i in gone:
        p[i] = 0.0
    top = max(h[i] for i in active)
    tol = eq_tol(top)
    tops = [i for i in active if h[i] >= top - tol]
    rest = sorted((i for i in active if h[i] < top - tol), key=lambda i: (h[i], i))
    drainable = float(sum(q[i] for i in rest))
    delta = max(0.0, min(gamma - m_removed, drainable))
    p[tops[0]] += m_removed + delta

    remaining = delta
    last = None
    for i in rest:
        if remaining <= 0.0:
            break
        take = min(p[i], remaining)
        if take > 0.0:
            p[i] -= take
            remaining -= take
            last = i

    tight = True
    if len(tops) > 1 and m_removed + delta > 0.0:
        tight = False
    if last is not None:
        level = h[last]
        group = [i for i in rest if abs(h[i] - level) <= tol and q[i] > 0.0]
        if len(group) > 1 and any(p[i] > 0.0 for i in group):
            tight = False
    return p, tight


def _check_unit(name, x):
    if not 0.0 <= x <= 1.0:
        raise ParamOutOfRange(f"{name}={x} outside [0, 1]")
