import copy
import json
import math

import networkx as nx

from drotree.errors import (
    MixedStages,
    ParseError,
    StageOutOfRange,
    UnknownNode,
    ValidationError,
)
from drotree.stage_model import StageTemplate

PROB_SUM_TOL = 1e-12


class TreeNode:
    def __init__(self, id, stage, parent, q, xi):
        self.id = id
        self.stage = stage
        self.parent = parent
        self.q = q
        self.xi = xi

    def to_dict(self):
        return {
            "id": self.id,
            "stage": self.stage,
            "parent": self.parent,
            "q": self.q,
            "xi": dict(self.xi),
        }

    def __repr__(self):
        return f"TreeNode({self.id}, stage={self.stage}, q={self.q})"


class ScenarioTree:
    """Finite scenario tree: nodes in instance-file order on a networkx DiGraph.

    The tree is treated as immutable once built; helpers that change gamma
    return a new tree sharing node and template objects.
    """

    def __init__(self, name, stages, gamma, nodes, stage_templates, zero_feasible=False):
        self.name = name
        self.T = stages
        self.gamma = [float(g) for g in gamma]
        self.stage_templates = list(stage_templates)
        self.zero_feasible = zero_feasible
        self.nodes = {}
        self.graph = nx.DiGraph()
        for node in nodes:
            if node.id in self.nodes:
                raise ValidationError("duplicate node id", node.id, "duplicate_id")
            self.nodes[node.id] = node
            self.graph.add_node(node.id)
        # edges added in file order of the child, so successors keep that order
        for node in nodes:
            if node.parent is not None and node.parent in self.nodes:
                self.graph.add_edge(node.parent, node.id)
        self.order = {nid: k for k, nid in enumerate(self.nodes)}
        self.root = None
        self.stage_nodes = {t: [] for t in range(1, stages + 1)}
        for node in nodes:
            if node.stage == 1 and self.root is None:
                self.root = node.id
            if node.stage in self.stage_nodes:
                self.stage_nodes[node.stage].append(node.id)

    def node(self, nid):
        try:
            return self.nodes[nid]
        except KeyError:
            raise UnknownNode(nid) from None

    def gamma_at(self, nid):
        """Radius of the ambiguity set over the children of `nid`."""
        return self.gamma[self.node(nid).stage - 1]

    def __len__(self):
        return len(self.nodes)

    def __repr__(self):
        return f"ScenarioTree({self.name}, T={self.T}, nodes={len(self.nodes)})"


def tree_from_dict(data):
    """Builds and validates a ScenarioTree from the instance JSON structure.

    Args:
        data (dict): Parsed instance file.

    Returns:
        ScenarioTree: The validated tree.
    """
    if not isinstance(data, dict):
        raise ParseError("instance must be a JSON object")
    try:
        stages = data["stages"]
        gamma = data["gamma"]
        raw_nodes = data["nodes"]
        raw_templates = data["stage_templates"]
    except KeyError as e:
        raise ParseError(f"instance is missing key {e.args[0]!r}") from None
    if not isinstance(stages, int) or isinstance(stages, bool):
        raise ParseError("'stages' must be an integer")
    if not isinstance(gamma, list) or not all(_is_number(g) for g in gamma):
        raise ParseError("'gamma' must be a list of numbers")
    if not isinstance(raw_nodes, list) or not isinstance(raw_templates, list):
        raise ParseError("'nodes' and 'stage_templates' must be lists")

    nodes = []
    for k, raw in enumerate(raw_nodes):
        if not isinstance(raw, dict):
            raise ParseError(f"node entry {k} is not an object")
        try:
            nid = raw["id"]
            stage = raw["stage"]
        except KeyError as e:
            raise ParseError(f"node entry {k} is missing {e.args[0]!r}") from None
        if not isinstance(nid, str):
            raise ParseError(f"node entry {k}: 'id' must be a string")
        if not isinstance(stage, int) or isinstance(stage, bool):
            raise ParseError(f"node {nid!r}: 'stage' must be an integer")
        parent = raw.get("parent")
        if parent is not None and not isinstance(parent, str):
            raise ParseError(f"node {nid!r}: 'parent' must be a string or null")
        q = raw.get("q")
        if q is None and parent is None:
            q = 1.0
        if not _is_number(q):
            raise ParseError(f"node {nid!r}: 'q' must be a number")
        xi = raw.get("xi", {})
        if not isinstance(xi, dict) or not all(_is_number(v) for v in xi.values()):
            raise ParseError(f"node {nid!r}: 'xi' must map names to numbers")
        nodes.append(TreeNode(nid, stage, parent, float(q), {k2: float(v) for k2, v in xi.items()}))

    templates = [StageTemplate.from_dict(t) for t in raw_templates]
    tree = ScenarioTree(
        data.get("name", "instance"),
        stages,
        gamma,
        nodes,
        templates,
        zero_feasible=bool(data.get("zero_feasible", False)),
    )
    validate(tree)
    return tree


def tree_to_dict(tree):
    out = {
        "name": tree.name,
        "stages": tree.T,
        "gamma": list(tree.gamma),
        "nodes": [n.to_dict() for n in tree.nodes.values()],
        "stage_templates": [t.to_dict() for t in tree.stage_templates],
    }
    if tree.zero_feasible:
        out["zero_feasible"] = True
    return out


def load_instance(path):
    """Loads an instance file.

    Args:
        path (str): Path to a UTF-8 JSON instance.

    Returns:
        ScenarioTree: The validated tree.
    """
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except OSError as e:
        raise ParseError(f"cannot read {path}: {e}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ParseError(f"{path} is not valid UTF-8 JSON: {e}") from None
    return tree_from_dict(data)


def validate(tree):
    T = tree.T
    if T < 2:
        raise ValidationError(f"stages must be >= 2, got {T}", rule="stages")
    if len(tree.gamma) != T - 1:
        raise ValidationError(
            f"gamma has length {len(tree.gamma)}, expected {T - 1}", rule="gamma_length"
        )
    for k, g in enumerate(tree.gamma):
        if not 0.0 <= g <= 1.0:
            raise ValidationError(f"gamma[{k}]={g} outside [0, 1]", rule="gamma_range")
    if len(tree.stage_templates) != T:
        raise ValidationError(
            f"{len(tree.stage_templates)} stage templates for {T} stages", rule="templates"
        )
    if tree.stage_templates[0].has_link():
        raise ValidationError("stage-1 template links to a previous stage", rule="link_at_root")
    for t in range(1, T):
        n_prev = tree.stage_templates[t - 1].n_vars
        for k, row in enumerate(tree.stage_templates[t].rows):
            bad = [j for j in row.link_coefs if j >= n_prev]
            if bad:
                raise ValidationError(
                    f"stage {t + 1} row {k}: link index {bad[0]} exceeds previous-stage dimension {n_prev}",
                    rule="link_index",
                )

    roots = [n for n in tree.nodes.values() if n.stage == 1]
    if len(roots) != 1:
        raise ValidationError(f"expected exactly one stage-1 node, found {len(roots)}", rule="root")
    if roots[0].parent is not None:
        raise ValidationError("root has a parent", roots[0].id, "root")

    for node in tree.nodes.values():
        if not node.id:
            raise ValidationError("empty node id", rule="empty_id")
        if not 1 <= node.stage <= T:
            raise ValidationError(f"stage {node.stage} outside [1, {T}]", node.id, "stage_range")
        if node.stage > 1:
            if node.parent is None or node.parent not in tree.nodes:
                raise ValidationError(f"parent {node.parent!r} not found", node.id, "orphan")
            if tree.nodes[node.parent].stage != node.stage - 1:
                raise ValidationError(
                    f"parent {node.parent!r} is not at stage {node.stage - 1}", node.id, "stage_gap"
                )
        if not (node.q >= 0.0 and math.isfinite(node.q)):
            raise ValidationError(f"q={node.q} must be finite and >= 0", node.id, "negative_q")
        if not all(math.isfinite(v) for v in node.xi.values()):
            raise ValidationError("non-finite xi value", node.id, "xi_finite")

    for nid in tree.nodes:
        kids = list(tree.graph.successors(nid))
        stage = tree.nodes[nid].stage
        if not kids:
            if stage != T:
                raise ValidationError(f"leaf at stage {stage} < {T}", nid, "leaf_stage")
            continue
        total = sum(tree.nodes[c].q for c in kids)
        if abs(total - 1.0) > PROB_SUM_TOL:
            raise ValidationError(
                f"children probabilities sum to {total!r}", nid, "probability_sum"
            )
    return tree


def children(tree, node):
    """Returns C(node) in instance-file order; empty for leaves."""
    tree.node(node)
    return list(tree.graph.successors(node))


def parent(tree, node):
    return tree.node(node).parent


def leaves(tree):
    return list(tree.stage_nodes[tree.T])


def nodes_at_stage(tree, t):
    if not 1 <= t <= tree.T:
        raise StageOutOfRange(f"stage {t} outside [1, {tree.T}]")
    return list(tree.stage_nodes[t])


def internal_nodes(tree):
    return [nid for t in range(1, tree.T) for nid in tree.stage_nodes[t]]


def bfs_order(tree, root=None):
    """Nodes of the subtree rooted at `root` (default: tree root), stage by stage."""
    root = tree.root if root is None else root
    tree.node(root)
    return [root] + [v for _, v in nx.bfs_edges(tree.graph, root)]


def project(tree, leaf, t):
    """The stage-t ancestor of a leaf (Π_t)."""
    node = tree.node(leaf)
    if node.stage != tree.T:
        raise StageOutOfRange(f"{leaf!r} is at stage {node.stage}, not a leaf")
    if not 1 <= t <= tree.T:
        raise StageOutOfRange(f"stage {t} outside [1, {tree.T}]")
    cur = leaf
    for _ in range(tree.T - t):
        cur = tree.nodes[cur].parent
    return cur


def path(tree, leaf):
    """Root-to-leaf node ids."""
    return [project(tree, leaf, t) for t in range(1, tree.T + 1)]


def ancestor_set(tree, removal):
    """The set of distinct parents of the removal set, a(S)."""
    removal = list(removal)
    if not removal:
        return set()
    stages = {tree.node(nid).stage for nid in removal}
    if len(stages) > 1:
        raise MixedStages(f"removal set spans stages {sorted(stages)}")
    if stages == {1}:
        raise StageOutOfRange("the root has no parent")
    return {tree.nodes[nid].parent for nid in removal}


def path_probability(tree, leaf):
    prob = 1.0
    for nid in path(tree, leaf)[1:]:
        prob *= tree.nodes[nid].q
    return prob


def with_gamma(tree, gamma):
    """Copy of `tree` with its radii replaced; a scalar applies to every stage."""
    if isinstance(gamma, (int, float)):
        gamma = [float(gamma)] * (tree.T - 1)
    new = copy.copy(tree)
    new.gamma = [float(g) for g in gamma]
    if len(new.gamma) != tree.T - 1:
        raise ValidationError(
            f"gamma has length {len(new.gamma)}, expected {tree.T - 1}", rule="gamma_length"
        )
    for k, g in enumerate(new.gamma):
        if not 0.0 <= g <= 1.0:
            raise ValidationError(f"gamma[{k}]={g} outside [0, 1]", rule="gamma_range")
    return new


def _is_number(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool)
