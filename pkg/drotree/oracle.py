"""Effectiveness by definition: re-solve with scenarios removed and compare values."""
import itertools
import math

from absl import logging

from drotree.effectiveness import EFFECTIVE, INEFFECTIVE, UNIDENTIFIED, eps_eff
from drotree.errors import InvalidRemoval, NotSolved
from drotree.solver import evaluate_policy, restriction_feasible, solve_subtree
from drotree.tree import ancestor_set, bfs_order, leaves, path
from drotree.util import parallel_map

PATHS = "Paths"
REALIZATIONS = "Realizations"

MONOTONICITY_TOL = 1e-8
# drops inside (eps, BORDERLINE_FACTOR * eps) are flagged
BORDERLINE_FACTOR = 10.0
# larger ineffective sets are not enumerated exhaustively
SUBSET_LIMIT = 8


class RemovalSet:
    def __init__(self, kind, ids):
        if kind not in (PATHS, REALIZATIONS):
            raise InvalidRemoval(f"unknown removal kind {kind!r}")
        self.kind = kind
        self.ids = frozenset(ids)

    @classmethod
    def paths(cls, ids):
        return cls(PATHS, ids)

    @classmethod
    def realizations(cls, ids):
        return cls(REALIZATIONS, ids)

    def to_dict(self, tree=None):
        ids = sorted(self.ids, key=tree.order.get) if tree is not None else sorted(self.ids)
        return {"kind": self.kind, "ids": ids}

    def __repr__(self):
        return f"RemovalSet({self.kind}, {sorted(self.ids)})"


class AssessmentResult:
    """Optimal value with the removal applied, against the unrestricted baseline.

    `value_at_policy` is the restricted problem evaluated at the original
    optimal policy; value <= value_at_policy <= baseline holds up to solver
    tolerance.
    """

    def __init__(self, removal, value, baseline, node=None, value_at_policy=None):
        self.removal = removal
        self.node = node
        self.value = value
        self.baseline = baseline
        self.value_at_policy = value_at_policy
        self.infeasible = math.isinf(value)
        self.verdict, self.borderline = judge(value, baseline)

    def to_dict(self, tree=None):
        out = {"removal": self.removal.to_dict(tree)}
        if self.node is not None:
            out["node"] = self.node
        out.update(
            {
                "value": self.value,
                "baseline": self.baseline,
                "verdict": self.verdict,
                "infeasible": self.infeasible,
                "borderline": self.borderline,
            }
        )
        return out

    def __repr__(self):
        return f"AssessmentResult({self.verdict}, value={self.value}, baseline={self.baseline})"


def judge(value, baseline):
    """(verdict, borderline) for a restricted value against its baseline."""
    if math.isinf(value):
        return EFFECTIVE, False
    eps = eps_eff(baseline)
    drop = baseline - value
    if drop > eps:
        return EFFECTIVE, drop < BORDERLINE_FACTOR * eps
    return INEFFECTIVE, False


def path_restrictions(tree, ids):
    """Groups removed leaves by parent: {stage T-1 node: removed leaves}."""
    ids = set(ids)
    if not ids:
        raise InvalidRemoval("empty removal set; the unrestricted value is the baseline")
    stage_T = set(leaves(tree))
    for nid in ids:
        tree.node(nid)
        if nid not in stage_T:
            raise InvalidRemoval(f"{nid!r} is not a scenario path (leaf)")
    groups = {}
    for leaf in sorted(ids, key=tree.order.get):
        groups.setdefault(tree.nodes[leaf].parent, set()).add(leaf)
    return groups


def assess_paths(tree, removal, outcome, v=False):
    """Assessment of a set of scenario paths.

    Only the last-stage ambiguity sets at the parents of the removed leaves
    are restricted to put no mass on them; every other stage is unchanged.

    Args:
        tree (ScenarioTree): The instance.
        removal (RemovalSet or iterable): Leaf ids to remove.
        outcome (SolveOutcome): Full-tree solve giving the baseline and policy.
        v (bool, optional): Log the verdict.

    Returns:
        AssessmentResult: Value +inf (Effective) when a restricted set is empty.
    """
    removal = _as_removal(removal, PATHS)
    groups = path_restrictions(tree, removal.ids)
    if outcome.root != tree.root:
        raise NotSolved("path assessment needs a full-tree outcome")
    baseline = outcome.q_values[tree.root]
    if not restriction_feasible(tree, groups):
        result = AssessmentResult(removal, math.inf, baseline)
    else:
        sub = solve_subtree(tree, tree.root, restricted=groups)
        at_policy = evaluate_policy(tree, outcome.policy, restricted=groups)[tree.root]
        result = AssessmentResult(removal, sub.objective, baseline, value_at_policy=at_policy)
    if v:
        logging.info("paths %s: %s", sorted(removal.ids), result)
    return result


def assess_realizations(tree, removal, outcome, v=False):
    """Conditional assessment of a set of realizations at one stage.

    For every parent of a removed node, the subtree problem at that parent is
    re-solved with the incoming state fixed to the optimal policy and p = 0
    forced on the removed children. Deeper stages stay unrestricted.

    Args:
        tree (ScenarioTree): The instance.
        removal (RemovalSet or iterable): Node ids, all at one stage >= 2.
        outcome (SolveOutcome): Full-tree solve.
        v (bool, optional): Log every verdict.

    Returns:
        dict: parent id -> AssessmentResult, in tree order.
    """
    removal = _as_removal(removal, REALIZATIONS)
    if not removal.ids:
        raise InvalidRemoval("empty removal set; the unrestricted value is the baseline")
    parents = sorted(ancestor_set(tree, removal.ids), key=tree.order.get)
    out = {}
    for par in parents:
        if par not in outcome.policy or par not in outcome.q_values:
            raise NotSolved(f"outcome has no decision for {par!r}")
        removed = {nid for nid in removal.ids if tree.nodes[nid].parent == par}
        grand = tree.nodes[par].parent
        par_x = outcome.policy[grand] if grand is not None else None
        restricted = {par: removed}
        baseline = outcome.q_values[par]
        if not restriction_feasible(tree, restricted):
            out[par] = AssessmentResult(removal, math.inf, baseline, node=par)
            continue
        sub = solve_subtree(tree, par, par_x, restricted=restricted)
        at_policy = evaluate_policy(tree, outcome.policy, par, par_x, restricted)[par]
        out[par] = AssessmentResult(removal, sub.objective, baseline, node=par, value_at_policy=at_policy)
        if v:
            logging.info("realizations %s at %s: %s", sorted(removed), par, out[par])
    return out


def verify_monotonicity(tree, s1, s2, outcome):
    """Removing more paths never increases the assessment value.

    Returns:
        tuple: (holds, value for s1, value for s2). Pairs where s2 is
        infeasible are excluded and report True.
    """
    s1, s2 = set(s1), set(s2)
    if not s1 <= s2:
        raise InvalidRemoval("first removal set must be contained in the second")
    v1 = assess_paths(tree, s1, outcome).value
    v2 = assess_paths(tree, s2, outcome).value
    if math.isinf(v2):
        return True, v1, v2
    return v2 <= v1 + MONOTONICITY_TOL * max(1.0, abs(v1)), v1, v2


def verify_union_intersection(tree, s_eff, s_ineff, s_any, outcome):
    """Union with an effective set is effective; subsets of an ineffective set are not.

    Args:
        tree (ScenarioTree): The instance.
        s_eff (iterable): Leaves that are effective by assessment.
        s_ineff (iterable): Leaves that are ineffective by assessment.
        s_any (iterable): Arbitrary leaves.
        outcome (SolveOutcome): Full-tree solve.

    Returns:
        dict: One boolean per checked statement.
    """
    s_eff, s_ineff, s_any = set(s_eff), set(s_ineff), set(s_any)
    if assess_paths(tree, s_eff, outcome).verdict != EFFECTIVE:
        raise InvalidRemoval("s_eff is not effective")
    if assess_paths(tree, s_ineff, outcome).verdict != INEFFECTIVE:
        raise InvalidRemoval("s_ineff is not ineffective")

    out = {"union_effective": assess_paths(tree, s_eff | s_any, outcome).verdict == EFFECTIVE}
    common = s_ineff & s_any
    # the empty removal leaves the problem unchanged
    out["intersection_ineffective"] = (
        not common or assess_paths(tree, common, outcome).verdict == INEFFECTIVE
    )
    subsets = _proper_subsets(sorted(s_ineff, key=tree.order.get))
    out["subsets_ineffective"] = all(
        assess_paths(tree, set(sub), outcome).verdict == INEFFECTIVE for sub in subsets
    )
    return out


def _proper_subsets(items):
    """Every non-empty proper subset, or the singletons and leave-one-out sets past SUBSET_LIMIT items."""
    n = len(items)
    if n <= SUBSET_LIMIT:
        return [c for k in range(1, n) for c in itertools.combinations(items, k)]
    logging.info("%d ineffective leaves; checking singletons and leave-one-out subsets only", n)
    return [(x,) for x in items] + [tuple(y for y in items if y != x) for x in items]


def verify_path_equivalence(tree, outcome, leaf):
    """Compares a leaf's path verdict with the conditional verdicts along its path.

    Returns:
        dict: "path" verdict, "conditional" node -> verdict, "borderline" flag
        and whether the path is effective exactly when every realization is.
    """
    path_result = assess_paths(tree, {leaf}, outcome)
    conditional = {}
    borderline = path_result.borderline
    for nid in path(tree, leaf)[1:]:
        res = assess_realizations(tree, {nid}, outcome)[tree.nodes[nid].parent]
        conditional[nid] = res.verdict
        borderline = borderline or res.borderline
    all_effective = all(verdict == EFFECTIVE for verdict in conditional.values())
    return {
        "leaf": leaf,
        "path": path_result.verdict,
        "conditional": conditional,
        "borderline": borderline,
        "holds": (path_result.verdict == EFFECTIVE) == all_effective,
    }


def verify_report(tree, report, outcome, jobs=1, paths=True, v=False):
    """Checks every identified label of a report against the oracle.

    Args:
        tree (ScenarioTree): The instance.
        report (EffectivenessReport): Output of effectiveness.classify.
        outcome (SolveOutcome): The solve the report was built from.
        jobs (int, optional): Worker processes for the assessments.
        paths (bool, optional): Also check identified path labels.
        v (bool, optional): Log each disagreement as it is found.

    Returns:
        dict: Checked counts, disagreements and borderline ids.
    """
    realizations = [
        nid for nid in bfs_order(tree)[1:] if report.node_labels[nid].label != UNIDENTIFIED
    ]
    results = parallel_map(
        _assess_one_realization, [(tree, outcome, nid) for nid in realizations], jobs
    )
    disagreements, borderline = [], []
    for nid, res in zip(realizations, results):
        label = report.node_labels[nid].label
        if res.borderline:
            borderline.append(nid)
        if res.verdict != label:
            disagreements.append(_disagreement(REALIZATIONS, nid, label, res))

    checked_paths = []
    if paths:
        checked_paths = [leaf for leaf, p in report.path_labels.items() if p.label != UNIDENTIFIED]
        results = parallel_map(
            _assess_one_path, [(tree, outcome, leaf) for leaf in checked_paths], jobs
        )
        for leaf, res in zip(checked_paths, results):
            label = report.path_labels[leaf].label
            if res.borderline:
                borderline.append(leaf)
            if res.verdict != label:
                disagreements.append(_disagreement(PATHS, leaf, label, res))

    for d in disagreements:
        logging.warning("oracle disagrees on %s %s: label %s, oracle %s", d["kind"], d["id"], d["label"], d["verdict"])
    if borderline:
        logging.warning("borderline oracle verdicts: %s", ", ".join(borderline))
    if v:
        logging.info(
            "oracle checked %d realizations and %d paths, %d disagreements",
            len(realizations),
            len(checked_paths),
            len(disagreements),
        )
    return {
        "checked_realizations": len(realizations),
        "checked_paths": len(checked_paths),
        "disagreements": disagreements,
        "borderline": borderline,
    }


def _disagreement(kind, nid, label, res):
    return {
        "kind": kind,
        "id": nid,
        "label": label,
        "verdict": res.verdict,
        "value": res.value,
        "baseline": res.baseline,
    }


def _assess_one_realization(args):
    tree, outcome, nid = args
    return assess_realizations(tree, {nid}, outcome)[tree.nodes[nid].parent]


def _assess_one_path(args):
    tree, outcome, leaf = args
    return assess_paths(tree, {leaf}, outcome)


def _as_removal(removal, kind):
    if isinstance(removal, RemovalSet):
        if removal.kind != kind:
            raise InvalidRemoval(f"expected a {kind} removal set, got {removal.kind}")
        return removal
    return RemovalSet(kind, removal)
