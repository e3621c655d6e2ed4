import math

import numpy as np
from absl import logging

from drotree.errors import (
    InfeasiblePolicy,
    InstanceInfeasible,
    InstanceUnbounded,
    InvalidRemoval,
    IterationLimit,
    NotSolved,
    ParamOutOfRange,
)
from drotree.lp import INFEASIBLE, UNBOUNDED, LinearProgram, solve_lp
from drotree.stage_model import materialize
from drotree.tree import bfs_order, children, leaves, path
from drotree.tv_risk import (
    TV_TOL,
    FiniteDist,
    worst_case_expectation,
    worst_case_expectation_restricted,
)

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 200
POLICY_TOL = 1e-6

EXTENSIVE = "Extensive"
BENDERS = "Benders"


class SolveOutcome:
    """Optimal policy with per-node cost-to-go and worst-case conditional distributions.

    `q_values` are always recomputed from the policy by the DP recursion, so
    they satisfy it by construction.
    """

    def __init__(
        self,
        objective,
        policy,
        q_values,
        worst_case,
        tight,
        solver,
        gap=0.0,
        root=None,
        iterations=0,
    ):
        self.objective = objective
        self.policy = policy
        self.q_values = q_values
        self.worst_case = worst_case
        self.tight = tight
        self.solver = solver
        self.gap = gap
        self.root = root
        self.iterations = iterations

    def to_dict(self, tree):
        nodes = []
        for nid in self.policy:
            kids = children(tree, nid)
            entry = {
                "id": nid,
                "x": [float(v) for v in self.policy[nid]],
                "q_value": float(self.q_values[nid]),
                "worst_case_children": {},
            }
            if kids and nid in self.worst_case:
                entry["worst_case_children"] = {
                    c: float(p) for c, p in zip(kids, self.worst_case[nid])
                }
                entry["tight"] = bool(self.tight[nid])
            nodes.append(entry)
        return {
            "objective": float(self.objective),
            "solver": self.solver,
            "gap": float(self.gap),
            "iterations": self.iterations,
            "nodes": nodes,
        }

    def __repr__(self):
        return f"SolveOutcome({self.solver}, objective={self.objective}, gap={self.gap})"


def node_blocks(tree):
    """Materialized NodeLP per node, cached on the tree (stage data never changes)."""
    cache = tree.__dict__.get("_block_cache")
    if cache is None:
        cache = {nid: materialize(tree, nid) for nid in tree.nodes}
        tree.__dict__["_block_cache"] = cache
    return cache


def restriction_feasible(tree, restricted):
    for nid, removed in (restricted or {}).items():
        kids = children(tree, nid)
        gone = set(removed)
        if not gone <= set(kids):
            raise InvalidRemoval(f"{sorted(gone - set(kids))} are not children of {nid!r}")
        mass = sum(tree.nodes[c].q for c in gone)
        if mass > tree.gamma_at(nid) + TV_TOL or len(gone) == len(kids):
            return False
    return True


def build_extensive(tree, root=None, parent_x=None, restricted=None):
    """Extensive-form LP of the nested problem over the subtree rooted at `root`.

    Every node gets its decision x and a free value variable theta. A leaf has
    theta >= c.x. An internal node encodes gamma*sup + (1-gamma)*CVaR_gamma of
    its children's thetas with epigraph variables u (sup), eta (CVaR
    threshold) and s_child >= 0. Nodes listed in `restricted` (node -> removed
    child ids) instead use the LP dual of the restricted TV worst case.

    Args:
        tree (ScenarioTree): The instance.
        root (str, optional): Subtree root. Defaults to the tree root.
        parent_x (array, optional): Fixed decision of root's parent; required
            when root is not the tree root.
        restricted (dict, optional): node id -> set of removed child ids.

    Returns:
        tuple: (LinearProgram, index) where index holds "x" (node -> column
        list), "theta" (node -> column) and "root".
    """
    root = tree.root if root is None else root
    restricted = restricted or {}
    blocks = node_blocks(tree)
    order = bfs_order(tree, root)
    root_parent = tree.nodes[root].parent
    if root_parent is not None and parent_x is None:
        raise ParamOutOfRange(f"subtree at {root!r} needs the parent decision")
    if not restriction_feasible(tree, {k: v for k, v in restricted.items() if k in order}):
        raise InvalidRemoval("restricted ambiguity set is empty at some node")

    lp = LinearProgram(name=f"extensive_{tree.name}_{root}")
    x_idx, theta = {}, {}
    for nid in order:
        b = blocks[nid]
        x_idx[nid] = [
            lp.add_var(0.0, b.lower[j], b.upper[j], name=f"x_{nid}_{j}") for j in range(b.n_vars)
        ]
        theta[nid] = lp.add_var(0.0, None, None, name=f"theta_{nid}")
    lp.objective[theta[root]] = 1.0

    for nid in order:
        b = blocks[nid]
        par = tree.nodes[nid].parent
        linked = nid != root and par is not None
        rhs = b.shifted_rhs(parent_x) if (nid == root and root_parent is not None) else b.rhs
        for i in range(b.n_rows):
            coefs = {x_idx[nid][j]: b.a_self[i, j] for j in range(b.n_vars) if b.a_self[i, j] != 0.0}
            if linked:
                for j in range(b.a_link.shape[1]):
                    if b.a_link[i, j] != 0.0:
                        coefs[x_idx[par][j]] = b.a_link[i, j]
            lp.add_row(coefs, b.senses[i], rhs[i], name=f"row_{nid}_{i}")

        value_row = {theta[nid]: 1.0}
        for j in range(b.n_vars):
            if b.cost[j] != 0.0:
                value_row[x_idx[nid][j]] = -b.cost[j]
        kids = children(tree, nid)
        if not kids:
            lp.add_row(value_row, ">=", 0.0, name=f"value_{nid}")
            continue
        gamma = tree.gamma_at(nid)
        if nid in restricted:
            _add_restricted_risk(lp, tree, nid, kids, set(restricted[nid]), gamma, theta, value_row)
        else:
            _add_risk(lp, tree, nid, kids, gamma, theta, value_row)
    return lp, {"x": x_idx, "theta": theta, "root": root}


def _add_risk(lp, tree, nid, kids, gamma, theta, value_row):
    u = lp.add_var(0.0, None, None, name=f"sup_{nid}")
    eta = lp.add_var(0.0, None, None, name=f"eta_{nid}")
    row = dict(value_row)
    row[u] = -gamma
    row[eta] = -(1.0 - gamma)
    for c in kids:
        s = lp.add_var(0.0, 0.0, None, name=f"s_{c}")
        row[s] = -tree.nodes[c].q
        lp.add_row({u: 1.0, theta[c]: -1.0}, ">=", 0.0, name=f"sup_{c}")
        lp.add_row({s: 1.0, eta: 1.0, theta[c]: -1.0}, ">=", 0.0, name=f"tail_{c}")
    lp.add_row(row, ">=", 0.0, name=f"risk_{nid}")


def _add_restricted_risk(lp, tree, nid, kids, removed, gamma, theta, value_row):
    mass = sum(tree.nodes[c].q for c in removed)
    nu = lp.add_var(0.0, None, None, name=f"nu_{nid}")
    lam = lp.add_var(0.0, 0.0, None, name=f"lambda_{nid}")
    row = dict(value_row)
    row[nu] = -1.0
    row[lam] = -(2.0 * gamma - mass)
    for c in kids:
        if c in removed:
            continue
        w = lp.add_var(0.0, None, None, name=f"w_{c}")
        row[w] = -tree.nodes[c].q
        lp.add_row({nu: 1.0, w: 1.0, theta[c]: -1.0}, ">=", 0.0, name=f"dual_{c}")
        lp.add_row({lam: 1.0, w: -1.0}, ">=", 0.0, name=f"wup_{c}")
        lp.add_row({lam: 1.0, w: 1.0}, ">=", 0.0, name=f"wdown_{c}")
    lp.add_row(row, ">=", 0.0, name=f"risk_{nid}")


def solve_subtree(tree, node, parent_x=None, restricted=None, polish=False, v=False):
    """Solves the problem rooted at `node` with the incoming state fixed.

    Args:
        tree (ScenarioTree): The instance.
        node (str): Subtree root.
        parent_x (array, optional): Decision of node's parent.
        restricted (dict, optional): node id -> removed child ids.
        polish (bool, optional): Re-solve every descendant subtree top-down so
            the returned policy is optimal at every node, not only at `node`.
        v (bool, optional): Verbose logging.

    Returns:
        SolveOutcome: objective is the LP optimum at `node`.
    """
    lp, index = build_extensive(tree, node, parent_x, restricted)
    sol = solve_lp(lp, v=v)
    _raise_on_status(sol, node)
    policy = {nid: sol.primal[cols].copy() for nid, cols in index["x"].items()}
    if polish:
        _polish(tree, policy, node, restricted)
    values, dists, tights = _evaluate(tree, policy, node, parent_x, restricted)
    return SolveOutcome(sol.objective_value, policy, values, dists, tights, EXTENSIVE, root=node)


def solve_extensive(tree, v=False):
    """Solves the nested problem as one LP and extracts a time-consistent policy.

    Args:
        tree (ScenarioTree): The instance.
        v (bool, optional): Verbose logging.

    Returns:
        SolveOutcome: Policy, cost-to-go per node and worst-case distributions.
    """
    outcome = solve_subtree(tree, tree.root, polish=True, v=v)
    drift = check_recursion(tree, outcome)
    root_gap = abs(outcome.q_values[tree.root] - outcome.objective) / max(1.0, abs(outcome.objective))
    if v:
        logging.info(
            "extensive %s: objective %.10g, recursion drift %.3g, root gap %.3g",
            tree.name,
            outcome.objective,
            drift,
            root_gap,
        )
    if root_gap > 1e-6:
        logging.warning("extensive %s: policy value differs from LP optimum by %.3g", tree.name, root_gap)
    return outcome


def _raise_on_status(sol, node):
    if sol.status == INFEASIBLE:
        raise InstanceInfeasible(f"problem rooted at {node!r} is infeasible")
    if sol.status == UNBOUNDED:
        raise InstanceUnbounded(f"problem rooted at {node!r} is unbounded")


def _polish(tree, policy, root, restricted):
    for nid in bfs_order(tree, root)[1:]:
        par_x = policy[tree.nodes[nid].parent]
        lp, index = build_extensive(tree, nid, par_x, restricted)
        sol = solve_lp(lp)
        if not sol.optimal:
            logging.warning("subtree re-solve at %s returned %s; keeping original decisions", nid, sol.status)
            continue
        for m, cols in index["x"].items():
            policy[m] = sol.primal[cols].copy()


def evaluate_policy(tree, policy, root=None, parent_x=None, restricted=None):
    """Cost-to-go of a fixed policy, bottom-up through the worst-case recursion.

    Args:
        tree (ScenarioTree): The instance.
        policy (dict): node id -> decision vector.
        root (str, optional): Subtree root. Defaults to the tree root.
        parent_x (array, optional): Decision of root's parent.
        restricted (dict, optional): node id -> removed child ids.

    Returns:
        dict: node id -> value.
    """
    values, _, _ = _evaluate(tree, policy, root, parent_x, restricted)
    return values


def _evaluate(tree, policy, root=None, parent_x=None, restricted=None):
    root = tree.root if root is None else root
    restricted = restricted or {}
    blocks = node_blocks(tree)
    values, dists, tights = {}, {}, {}
    for nid in reversed(bfs_order(tree, root)):
        if nid not in policy:
            raise NotSolved(f"policy has no decision for {nid!r}")
        b = blocks[nid]
        x = np.asarray(policy[nid], dtype=float)
        par = tree.nodes[nid].parent
        par_x = parent_x if nid == root else policy[par]
        if par is None:
            par_x = None
        if b.max_violation(x, par_x) > POLICY_TOL:
            raise InfeasiblePolicy(nid)
        kids = children(tree, nid)
        if not kids:
            values[nid] = b.stage_cost(x)
            continue
        dist = FiniteDist([values[c] for c in kids], [tree.nodes[c].q for c in kids])
        gamma = tree.gamma_at(nid)
        if nid in restricted:
            gone = set(restricted[nid])
            res = worst_case_expectation_restricted(dist, gamma, [k for k, c in enumerate(kids) if c in gone])
        else:
            res = worst_case_expectation(dist, gamma)
        values[nid] = b.stage_cost(x) + res.value
        dists[nid] = res.dist
        tights[nid] = res.tight
    return values, dists, tights


def check_recursion(tree, outcome):
    """Largest relative violation of the DP recursion by the outcome's values."""
    blocks = node_blocks(tree)
    worst = 0.0
    for nid, x in outcome.policy.items():
        kids = children(tree, nid)
        expected = blocks[nid].stage_cost(x)
        if kids:
            dist = FiniteDist([outcome.q_values[c] for c in kids], [tree.nodes[c].q for c in kids])
            expected += worst_case_expectation(dist, tree.gamma_at(nid)).value
        q = outcome.q_values[nid]
        worst = max(worst, abs(q - expected) / max(1.0, abs(q)))
    return worst


def worst_case_path_probabilities(tree, outcome):
    """Probability of each leaf under the worst-case conditional distributions."""
    if outcome.root != tree.root:
        raise NotSolved("worst-case path probabilities need a full-tree outcome")
    out = {}
    for leaf in leaves(tree):
        prob = 1.0
        nodes = path(tree, leaf)
        for par, nid in zip(nodes[:-1], nodes[1:]):
            prob *= float(outcome.worst_case[par][children(tree, par).index(nid)])
        out[leaf] = prob
    return out


class NestedBenders:
    """Nested Benders decomposition over the scenario tree.

    Each node keeps a single aggregated optimality cut per pass on
    phi >= rho(children values), with the children weighted by a worst-case
    distribution of their current approximate values. Forward passes visit
    every node, so the stopping test certifies every subtree, not only the
    root.
    """

    def __init__(self, tree, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, v=False):
        self.tree = tree
        self.tol = tol
        self.max_iter = max_iter
        self.v = v
        self.blocks = node_blocks(tree)
        self.order = bfs_order(tree)
        self.cuts = {nid: [] for nid in self.order}
        self.feas_cuts = {nid: [] for nid in self.order}
        self.phi_lower = self._value_lower_bounds()

    def _value_lower_bounds(self):
        """node id -> lower bound on the worst-case cost-to-go of its children."""
        internal = [nid for nid in self.order if children(self.tree, nid)]
        if all(np.all(b.cost >= 0.0) and np.all(b.lower >= 0.0) for b in self.blocks.values()):
            return {nid: 0.0 for nid in internal}
        return {nid: self._nominal_lower_bound(nid) for nid in internal}

    def _nominal_lower_bound(self, nid):
        """Minimum nominal expected cost below `nid` over every decision reachable at `nid`.

        The nominal distribution lies in every TV ball, so this bounds the
        worst case from below. Ancestors keep their rows and cost nothing.
        """
        tree, blocks = self.tree, self.blocks
        ancestors = []
        cur = tree.nodes[nid].parent
        while cur is not None:
            ancestors.insert(0, cur)
            cur = tree.nodes[cur].parent
        lp = LinearProgram(name=f"phi_bound_{nid}")
        cols, prob = {}, {}
        for m in ancestors + bfs_order(tree, nid):
            b = blocks[m]
            par = tree.nodes[m].parent
            below = m != nid and m not in ancestors
            prob[m] = prob[par] * tree.nodes[m].q if below else 1.0
            weight = prob[m] if below else 0.0
            cols[m] = [lp.add_var(weight * b.cost[j], b.lower[j], b.upper[j]) for j in range(b.n_vars)]
            for i in range(b.n_rows):
                row = {cols[m][j]: b.a_self[i, j] for j in range(b.n_vars) if b.a_self[i, j] != 0.0}
                if par is not None:
                    for j in range(b.a_link.shape[1]):
                        if b.a_link[i, j] != 0.0:
                            row[cols[par][j]] = b.a_link[i, j]
                lp.add_row(row, b.senses[i], b.rhs[i])
        sol = solve_lp(lp)
        if sol.status == UNBOUNDED:
            raise InstanceUnbounded(
                f"expected cost below {nid!r} has no lower bound; benders needs bounded recourse"
            )
        if sol.status == INFEASIBLE:
            raise InstanceInfeasible(f"no decision at {nid!r} leaves its subtree feasible")
        if self.v:
            logging.info("benders %s: values below %s start at %.10g", tree.name, nid, sol.objective_value)
        return sol.objective_value

    def node_lp(self, nid, parent_x):
        b = self.blocks[nid]
        lp = b.to_lp(parent_x)
        if children(self.tree, nid):
            phi = lp.add_var(1.0, self.phi_lower[nid], None, name="phi")
            for alpha, beta in self.cuts[nid]:
                row = {j: -beta[j] for j in range(b.n_vars) if beta[j] != 0.0}
                row[phi] = 1.0
                lp.add_row(row, ">=", alpha, name="cut")
        for alpha, beta in self.feas_cuts[nid]:
            lp.add_row({j: beta[j] for j in range(b.n_vars) if beta[j] != 0.0}, "<=", -alpha, name="fcut")
        return lp

    def solve_node(self, nid, parent_x):
        sol = solve_lp(self.node_lp(nid, parent_x))
        if sol.status == UNBOUNDED:
            raise InstanceUnbounded(f"stage problem at {nid!r} is unbounded")
        return sol

    def feasibility_cut(self, nid, parent_x):
        """Cut alpha + beta.x_parent <= 0 excluding parent_x, from a slack-penalized LP."""
        b = self.blocks[nid]
        lp = LinearProgram(name=f"feasibility_{nid}")
        for j in range(b.n_vars):
            lp.add_var(0.0, b.lower[j], b.upper[j])
        rhs = b.shifted_rhs(parent_x)
        rows = [(b.a_self[i], b.senses[i], rhs[i]) for i in range(b.n_rows)]
        rows += [(beta, "<=", -alpha) for alpha, beta in self.feas_cuts[nid]]
        for coefs, sense, r in rows:
            row = {j: coefs[j] for j in range(b.n_vars) if coefs[j] != 0.0}
            if sense in ("<=", "="):
                row[lp.add_var(1.0, 0.0, None)] = -1.0
            if sense in (">=", "="):
                row[lp.add_var(1.0, 0.0, None)] = 1.0
            lp.add_row(row, sense, r)
        sol = solve_lp(lp)
        if not sol.optimal:
            raise InstanceInfeasible(f"cannot build a feasibility cut at {nid!r}")
        grad = -b.a_link.T @ sol.duals[: b.n_rows]
        alpha = sol.objective_value - float(grad @ parent_x)
        return alpha, grad

    def forward(self):
        policy, lower = {}, {}
        for nid in self.order:
            par = self.tree.nodes[nid].parent
            par_x = policy[par] if par is not None else None
            sol = self.solve_node(nid, par_x)
            if sol.status == INFEASIBLE:
                if par is None:
                    raise InstanceInfeasible(f"root problem {nid!r} is infeasible")
                self.feas_cuts[par].append(self.feasibility_cut(nid, par_x))
                if self.v:
                    logging.info("feasibility cut on %s from %s", par, nid)
                return None, None
            policy[nid] = sol.primal[: self.blocks[nid].n_vars].copy()
            lower[nid] = sol.objective_value
        return policy, lower

    def backward(self, policy):
        tree = self.tree
        for t in range(tree.T - 1, 0, -1):
            for nid in tree.stage_nodes[t]:
                x_hat = policy[nid]
                kids = children(tree, nid)
                vals, grads = [], []
                for c in kids:
                    sol = self.solve_node(c, x_hat)
                    if sol.status == INFEASIBLE:
                        self.feas_cuts[nid].append(self.feasibility_cut(c, x_hat))
                        break
                    m = self.blocks[c].n_rows
                    vals.append(sol.objective_value)
                    grads.append(-self.blocks[c].a_link.T @ sol.duals[:m])
                else:
                    dist = FiniteDist(vals, [tree.nodes[c].q for c in kids])
                    p = worst_case_expectation(dist, tree.gamma_at(nid)).dist
                    beta = sum(pk * g for pk, g in zip(p, grads))
                    alpha = float(p @ np.asarray(vals)) - float(beta @ x_hat)
                    self.cuts[nid].append((alpha, np.asarray(beta, dtype=float)))

    def run(self):
        tree = self.tree
        best = None
        for it in range(1, self.max_iter + 1):
            policy, lower = self.forward()
            if policy is None:
                continue
            values, dists, tights = _evaluate(tree, policy)
            outcome = SolveOutcome(
                values[tree.root], policy, values, dists, tights, BENDERS,
                gap=values[tree.root] - lower[tree.root], root=tree.root, iterations=it,
            )
            if best is None or outcome.objective < best.objective:
                best = outcome
            node_gap = max(
                (values[n] - lower[n]) / max(1.0, abs(lower[n])) for n in self.order
            )
            if self.v:
                logging.info(
                    "benders %s pass %d: lower %.10g upper %.10g worst node gap %.3g",
                    tree.name, it, lower[tree.root], values[tree.root], node_gap,
                )
            if node_gap <= self.tol:
                return outcome
            self.backward(policy)
        if best is None:
            raise InstanceInfeasible(f"no feasible forward pass in {self.max_iter} passes")
        logging.warning("benders %s stopped after %d passes, gap %.3g", tree.name, self.max_iter, best.gap)
        raise IterationLimit(best, f"benders stopped after {self.max_iter} passes with gap {best.gap:.3g}")


def solve_benders(tree, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, v=False):
    """Solves the nested problem by nested Benders decomposition.

    Args:
        tree (ScenarioTree): The instance.
        tol (float, optional): Relative gap at which every node is considered
            solved. Defaults to 1e-6.
        max_iter (int, optional): Maximum forward/backward passes. Defaults to 200.
        v (bool, optional): Log bounds per pass.

    Returns:
        SolveOutcome: With `gap` = upper - lower bound at the root.
    """
    return NestedBenders(tree, tol, max_iter, v).run()
