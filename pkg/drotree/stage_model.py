import math

import numpy as np

from drotree.errors import MissingXiField, ParseError, ValidationError
from drotree.lp import LinearProgram, solve_lp

SENSES = {"<=": "<=", ">=": ">=", "=": "=", "==": "="}


class Coef:
    """A template entry: a constant, or scale * xi[field] + offset."""

    def __init__(self, value=0.0, field=None, scale=1.0, offset=0.0):
        self.value = float(value)
        self.field = field
        self.scale = float(scale)
        self.offset = float(offset)

    @property
    def kind(self):
        return "const" if self.field is None else "xi"

    @classmethod
    def parse(cls, obj, where="coefficient"):
        if isinstance(obj, bool):
            raise ParseError(f"{where}: booleans are not coefficients")
        if isinstance(obj, (int, float)):
            return cls(obj)
        if isinstance(obj, dict) and "xi" in obj:
            scale = obj.get("scale", 1.0)
            offset = obj.get("offset", 0.0)
            if not isinstance(obj["xi"], str) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in (scale, offset)
            ):
                raise ParseError(f"{where}: malformed xi coefficient {obj!r}")
            return cls(field=obj["xi"], scale=scale, offset=offset)
        raise ParseError(f"{where}: expected a number or {{'xi': ...}}, got {obj!r}")

    def evaluate(self, xi, node=None):
        if self.field is None:
            return self.value
        if self.field not in xi:
            raise MissingXiField(node, self.field)
        return self.scale * xi[self.field] + self.offset

    def to_json(self):
        if self.field is None:
            return self.value
        return {"xi": self.field, "scale": self.scale, "offset": self.offset}

    def __repr__(self):
        if self.field is None:
            return f"Coef({self.value})"
        return f"Coef({self.scale}*xi[{self.field}]+{self.offset})"


class TemplateRow:
    def __init__(self, self_coefs, link_coefs, sense, rhs):
        self.self_coefs = self_coefs
        self.link_coefs = link_coefs
        self.sense = sense
        self.rhs = rhs


class StageTemplate:
    """Polyhedral data of one stage: cost, rows coupling x_t with x_{t-1}, bounds.

    A None lower bound means the variable is free below; a None upper bound
    means +inf.
    """

    def __init__(self, n_vars, cost, rows, bounds=None):
        self.n_vars = n_vars
        self.cost = cost
        self.rows = rows
        if bounds is None:
            bounds = [(Coef(0.0), None) for _ in range(n_vars)]
        self.bounds = bounds

    def has_link(self):
        return any(row.link_coefs for row in self.rows)

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ParseError("stage template must be an object")
        try:
            n_vars = data["n_vars"]
            raw_cost = data["cost"]
        except KeyError as e:
            raise ParseError(f"stage template is missing {e.args[0]!r}") from None
        if not isinstance(n_vars, int) or n_vars < 1:
            raise ParseError("'n_vars' must be a positive integer")
        if not isinstance(raw_cost, list) or len(raw_cost) != n_vars:
            raise ParseError(f"'cost' must list {n_vars} coefficients")
        cost = [Coef.parse(c, "cost") for c in raw_cost]

        rows = []
        for k, raw in enumerate(data.get("rows", [])):
            if not isinstance(raw, dict):
                raise ParseError(f"row {k} must be an object")
            sense = SENSES.get(raw.get("sense"))
            if sense is None:
                raise ParseError(f"row {k}: sense must be one of <=, >=, =")
            if "rhs" not in raw:
                raise ParseError(f"row {k} is missing 'rhs'")
            rows.append(
                TemplateRow(
                    _parse_sparse(raw.get("self", {}), n_vars, f"row {k} self"),
                    _parse_sparse(raw.get("link", {}), None, f"row {k} link"),
                    sense,
                    Coef.parse(raw["rhs"], f"row {k} rhs"),
                )
            )

        bounds = None
        if "bounds" in data:
            raw_bounds = data["bounds"]
            if not isinstance(raw_bounds, list) or len(raw_bounds) != n_vars:
                raise ParseError(f"'bounds' must list {n_vars} [lower, upper] pairs")
            bounds = []
            for pair in raw_bounds:
                if not isinstance(pair, list) or len(pair) != 2:
                    raise ParseError("each bound must be a [lower, upper] pair")
                lo, hi = pair
                bounds.append(
                    (
                        None if lo is None else Coef.parse(lo, "lower bound"),
                        None if hi is None else Coef.parse(hi, "upper bound"),
                    )
                )
        return cls(n_vars, cost, rows, bounds)

    def to_dict(self):
        return {
            "n_vars": self.n_vars,
            "cost": [c.to_json() for c in self.cost],
            "rows": [
                {
                    "self": {str(j): c.to_json() for j, c in row.self_coefs.items()},
                    "link": {str(j): c.to_json() for j, c in row.link_coefs.items()},
                    "sense": row.sense,
                    "rhs": row.rhs.to_json(),
                }
                for row in self.rows
            ],
            "bounds": [
                [None if lo is None else lo.to_json(), None if hi is None else hi.to_json()]
                for lo, hi in self.bounds
            ],
        }


class NodeLP:
    """Numeric stage block of one node: A_self x_t + A_link x_{t-1} (sense) rhs."""

    def __init__(self, node, cost, a_self, a_link, senses, rhs, lower, upper):
        self.node = node
        self.cost = cost
        self.a_self = a_self
        self.a_link = a_link
        self.senses = senses
        self.rhs = rhs
        self.lower = lower
        self.upper = upper

    @property
    def n_vars(self):
        return len(self.cost)

    @property
    def n_rows(self):
        return len(self.senses)

    def shifted_rhs(self, parent_x=None):
        if parent_x is None or self.a_link.shape[1] == 0:
            return self.rhs.copy()
        return self.rhs - self.a_link @ np.asarray(parent_x, dtype=float)

    def stage_cost(self, x):
        return float(self.cost @ np.asarray(x, dtype=float))

    def max_violation(self, x, parent_x=None):
        """Largest scaled violation of rows and bounds at x, 0 when feasible."""
        x = np.asarray(x, dtype=float)
        worst = 0.0
        if self.n_rows:
            lhs = self.a_self @ x
            rhs = self.shifted_rhs(parent_x)
            for i, sense in enumerate(self.senses):
                scale = max(1.0, abs(rhs[i]))
                if sense == "<=":
                    gap = lhs[i] - rhs[i]
                elif sense == ">=":
                    gap = rhs[i] - lhs[i]
                else:
                    gap = abs(lhs[i] - rhs[i])
                worst = max(worst, gap / scale)
        below = self.lower - x
        above = x - self.upper
        worst = max(worst, float(np.max(below, initial=0.0)), float(np.max(above, initial=0.0)))
        return worst

    def to_lp(self, parent_x=None):
        lp = LinearProgram(name=f"node_{self.node}")
        for j in range(self.n_vars):
            lp.add_var(self.cost[j], self.lower[j], self.upper[j], name=f"x{j}")
        rhs = self.shifted_rhs(parent_x)
        for i in range(self.n_rows):
            lp.add_row(_row_dict(self.a_self[i]), self.senses[i], rhs[i], name=f"r{i}")
        return lp

    def __repr__(self):
        return f"NodeLP({self.node}, n={self.n_vars}, m={self.n_rows})"


def materialize(tree, node):
    """Resolves the stage template of `node` against its realization.

    Args:
        tree (ScenarioTree): The instance.
        node (str): Node id.

    Returns:
        NodeLP: Numeric cost, rows and bounds of the node's stage problem.
    """
    tn = tree.node(node)
    template = tree.stage_templates[tn.stage - 1]
    n_prev = tree.stage_templates[tn.stage - 2].n_vars if tn.stage > 1 else 0
    xi = tn.xi

    cost = np.array([c.evaluate(xi, node) for c in template.cost], dtype=float)
    m = len(template.rows)
    a_self = np.zeros((m, template.n_vars))
    a_link = np.zeros((m, n_prev))
    rhs = np.zeros(m)
    senses = []
    for i, row in enumerate(template.rows):
        for j, c in row.self_coefs.items():
            a_self[i, j] = c.evaluate(xi, node)
        for j, c in row.link_coefs.items():
            a_link[i, j] = c.evaluate(xi, node)
        rhs[i] = row.rhs.evaluate(xi, node)
        senses.append(row.sense)

    lower = np.array(
        [-math.inf if lo is None else lo.evaluate(xi, node) for lo, _ in template.bounds]
    )
    upper = np.array([math.inf if hi is None else hi.evaluate(xi, node) for _, hi in template.bounds])
    if np.any(lower > upper):
        raise ValidationError("lower bound above upper bound", node, "bounds")
    for arr in (cost, a_self, a_link, rhs):
        if not np.all(np.isfinite(arr)):
            raise ValidationError("non-finite stage data", node, "finite")
    return NodeLP(node, cost, a_self, a_link, senses, rhs, lower, upper)


def check_zero_recourse(tree):
    """Node ids whose stage problem is infeasible when the parent decision is zero."""
    bad = []
    for nid in tree.nodes:
        block = materialize(tree, nid)
        parent_x = np.zeros(block.a_link.shape[1])
        sol = solve_lp(block.to_lp(parent_x))
        if sol.status == "Infeasible":
            bad.append(nid)
    return bad


def _parse_sparse(raw, n, where):
    if not isinstance(raw, dict):
        raise ParseError(f"{where} must map indices to coefficients")
    out = {}
    for key, val in raw.items():
        try:
            j = int(key)
        except (TypeError, ValueError):
            raise ParseError(f"{where}: index {key!r} is not an integer") from None
        if j < 0 or (n is not None and j >= n):
            raise ParseError(f"{where}: index {j} out of range")
        out[j] = Coef.parse(val, where)
    return dict(sorted(out.items()))


def _row_dict(values):
    return {j: float(v) for j, v in enumerate(values) if v != 0.0}
