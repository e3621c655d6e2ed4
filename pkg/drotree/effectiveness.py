"""Easy-to-check effectiveness labels from primal categories.

A child is conditionally effective when it keeps positive mass in every
worst-case distribution at its parent, and ineffective when every worst-case
distribution drains it. Path labels combine the conditional labels along the
path.
"""
from absl import logging

from drotree.errors import NotSolved, ParamOutOfRange, StageOutOfRange
from drotree.solver import node_blocks, worst_case_path_probabilities
from drotree.tree import bfs_order, children, internal_nodes, leaves, path, path_probability
from drotree.tv_risk import C1, C2, C3, C4, FiniteDist, categorize

EPS_EFF = 1e-6
# equality of nominal masses
MASS_TOL = 1e-12

EFFECTIVE = "Effective"
INEFFECTIVE = "Ineffective"
UNIDENTIFIED = "Unidentified"

# how the C2 mass is compared with gamma
C2_RULES = ("c2_only", "c1_plus_c2")


def eps_eff(baseline):
    return EPS_EFF * max(1.0, abs(baseline))


class CondLabel:
    def __init__(self, node, label, category, reason):
        self.node = node
        self.label = label
        self.category = category
        self.reason = reason

    def __repr__(self):
        return f"CondLabel({self.node}, {self.label}, {self.category}, {self.reason})"


class PathLabel:
    def __init__(self, leaf, label, witness=None):
        self.leaf = leaf
        self.label = label
        self.witness = witness

    def __repr__(self):
        return f"PathLabel({self.leaf}, {self.label}, witness={self.witness})"


class EffectivenessReport:
    """Conditional labels for every non-root node and path labels for every leaf."""

    def __init__(self, tree, outcome, node_labels, path_labels, c2_rule):
        self.name = tree.name
        self.gamma = list(tree.gamma)
        self.c2_rule = c2_rule
        self.objective = outcome.objective
        self.node_labels = node_labels
        self.path_labels = path_labels
        self.stages = {nid: tree.nodes[nid].stage for nid in node_labels}
        self.nominal_prob = {leaf: path_probability(tree, leaf) for leaf in path_labels}
        self.worst_case_prob = worst_case_path_probabilities(tree, outcome)
        self.oracle = None

    def paths_with(self, label):
        return [leaf for leaf, p in self.path_labels.items() if p.label == label]

    def summary(self):
        n_nodes = len(self.node_labels)
        n_unid_nodes = sum(1 for c in self.node_labels.values() if c.label == UNIDENTIFIED)
        return {
            "n_effective_paths": len(self.paths_with(EFFECTIVE)),
            "n_ineffective": len(self.paths_with(INEFFECTIVE)),
            "n_unidentified": len(self.paths_with(UNIDENTIFIED)),
            "unidentified_fraction": n_unid_nodes / n_nodes if n_nodes else 0.0,
        }

    def to_dict(self):
        out = {
            "name": self.name,
            "gamma": self.gamma,
            "c2_rule": self.c2_rule,
            "objective": self.objective,
            "nodes": [
                {
                    "id": nid,
                    "stage": self.stages[nid],
                    "category": c.category,
                    "cond_label": c.label,
                    "reason": c.reason,
                }
                for nid, c in self.node_labels.items()
            ],
            "leaves": [
                {
                    "id": leaf,
                    "path_label": p.label,
                    "witness": p.witness,
                    "nominal_prob": self.nominal_prob[leaf],
                    "worst_case_prob": self.worst_case_prob[leaf],
                }
                for leaf, p in self.path_labels.items()
            ],
            "summary": self.summary(),
        }
        if self.oracle is not None:
            out["oracle"] = self.oracle
        return out

    def __repr__(self):
        return f"EffectivenessReport({self.name}, {self.summary()})"


def classify_node_children(outcome, tree, node, c2_rule="c2_only"):
    """Labels the children of `node` from the categories of their cost-to-go.

    Args:
        outcome (SolveOutcome): A full-tree solve of `tree`.
        tree (ScenarioTree): The instance.
        node (str): Internal node id.
        c2_rule (str, optional): "c2_only" compares the C2 mass with gamma,
            "c1_plus_c2" compares the nominal mass at or below VaR.

    Returns:
        list: One CondLabel per child, in child order.
    """
    if c2_rule not in C2_RULES:
        raise ParamOutOfRange(f"unknown c2 rule {c2_rule!r}; expected one of {C2_RULES}")
    kids = children(tree, node)
    if not kids:
        raise StageOutOfRange(f"{node!r} is a leaf")
    missing = [n for n in [node] + kids if n not in outcome.q_values]
    if missing:
        raise NotSolved(f"outcome has no value for {missing[0]!r}")

    stage_cost = node_blocks(tree)[node].stage_cost(outcome.policy[node])
    h = [stage_cost + outcome.q_values[c] for c in kids]
    q = [tree.nodes[c].q for c in kids]
    gamma = tree.gamma_at(node)
    cats = categorize(FiniteDist(h, q), gamma)

    if gamma <= 0.0 or gamma >= 1.0:
        return [CondLabel(c, UNIDENTIFIED, cat, "gamma_boundary") for c, cat in zip(kids, cats.labels)]
    if any(p <= 0.0 for p in q):
        return [CondLabel(c, UNIDENTIFIED, cat, "zero_probability") for c, cat in zip(kids, cats.labels)]

    m4 = cats.mass(C4)
    m2 = cats.mass(C2)
    n2 = len(cats.members(C2))
    n4 = len(cats.members(C4))
    below = m2 + cats.mass(C1)

    labels = []
    for k, c in enumerate(kids):
        cat = cats.labels[k]
        if cat == C4:
            if n4 == 1:
                labels.append(CondLabel(c, EFFECTIVE, cat, "C4_sup"))
            elif gamma - q[k] < 1.0 - m4 - MASS_TOL:
                labels.append(CondLabel(c, EFFECTIVE, cat, "C4_sup"))
            else:
                # the other maximal children can absorb all of this child's mass
                labels.append(CondLabel(c, UNIDENTIFIED, cat, "C4_tied_slack"))
        elif cat == C3:
            labels.append(CondLabel(c, EFFECTIVE, cat, "C3_between"))
        elif cat == C1:
            labels.append(CondLabel(c, INEFFECTIVE, cat, "C1_below_var"))
        else:
            mass = m2 if c2_rule == "c2_only" else below
            if abs(mass - gamma) <= MASS_TOL * max(1, len(kids)):
                labels.append(CondLabel(c, INEFFECTIVE, cat, "C2_mass_equals_gamma"))
            elif mass > gamma and n2 == 1:
                labels.append(CondLabel(c, EFFECTIVE, cat, "C2_single_exceeds_gamma"))
            else:
                labels.append(CondLabel(c, UNIDENTIFIED, cat, "C2_unresolved"))
    return labels


def classify_paths(outcome, tree, node_labels=None, c2_rule="c2_only"):
    """Path label per leaf: Ineffective if any realization on it is, Effective if all are.

    Args:
        outcome (SolveOutcome): A full-tree solve of `tree`.
        tree (ScenarioTree): The instance.
        node_labels (dict, optional): node id -> CondLabel; computed when omitted.
        c2_rule (str, optional): Passed to classify_node_children.

    Returns:
        dict: leaf id -> PathLabel, in leaf order.
    """
    if node_labels is None:
        node_labels = _all_node_labels(outcome, tree, c2_rule)
    out = {}
    for leaf in leaves(tree):
        along = path(tree, leaf)[1:]
        missing = [n for n in along if n not in node_labels]
        if missing:
            raise NotSolved(f"no conditional label for {missing[0]!r}")
        witness = next((n for n in along if node_labels[n].label == INEFFECTIVE), None)
        if witness is not None:
            out[leaf] = PathLabel(leaf, INEFFECTIVE, witness)
        elif all(node_labels[n].label == EFFECTIVE for n in along):
            out[leaf] = PathLabel(leaf, EFFECTIVE)
        else:
            out[leaf] = PathLabel(leaf, UNIDENTIFIED)
    return out


def classify(tree, outcome, c2_rule="c2_only", v=False):
    """Runs the conditional and path classification over the whole tree.

    Args:
        tree (ScenarioTree): The instance.
        outcome (SolveOutcome): A full-tree solve of `tree`.
        c2_rule (str, optional): See classify_node_children.
        v (bool, optional): Log every conditional label.

    Returns:
        EffectivenessReport: Labels, path probabilities and a summary.
    """
    if outcome.root != tree.root:
        raise NotSolved("classification needs a full-tree outcome")
    node_labels = _all_node_labels(outcome, tree, c2_rule)
    if v:
        for label in node_labels.values():
            logging.info("%s", label)
    report = EffectivenessReport(
        tree, outcome, node_labels, classify_paths(outcome, tree, node_labels), c2_rule
    )
    if v:
        logging.info("%s", report)
    return report


def _all_node_labels(outcome, tree, c2_rule):
    labels = {}
    for node in internal_nodes(tree):
        for label in classify_node_children(outcome, tree, node, c2_rule):
            labels[label.node] = label
    return {nid: labels[nid] for nid in bfs_order(tree)[1:]}
