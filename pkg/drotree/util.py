import concurrent.futures
import json
import math
import os

import numpy as np
import pandas as pd
from absl import logging

from drotree.effectiveness import classify
from drotree.errors import IterationLimit
from drotree.solver import solve_benders, solve_extensive
from drotree.tree import bfs_order, with_gamma

DOT_STYLES = {
    "Effective": "style=solid, penwidth=2",
    "Ineffective": "style=dotted",
    "Unidentified": "style=solid, penwidth=1",
}

SWEEP_COLUMNS = ["gamma", "objective", "n_effective_paths", "n_ineffective", "n_unidentified"]


def default_jobs():
    raw = os.environ.get("DROTREE_JOBS")
    if raw:
        try:
            jobs = int(raw)
            if jobs >= 1:
                return jobs
        except ValueError:
            pass
        logging.warning("ignoring DROTREE_JOBS=%r; expected a positive integer", raw)
    return os.cpu_count() or 1


def parallel_map(fn, items, jobs=1):
    """Maps a module-level function over items, in order, on up to `jobs` processes."""
    items = list(items)
    if jobs is None or jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with concurrent.futures.ProcessPoolExecutor(max_workers=min(jobs, len(items))) as executor:
        return list(executor.map(fn, items))


def _encode(obj, level):
    pad = "  " * (level + 1)
    end = "  " * level
    if obj is None or isinstance(obj, (bool, np.bool_)):
        return "null" if obj is None else ("true" if obj else "false")
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return format(x, ".17g") if math.isfinite(x) else "null"
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        body = ",\n".join(f"{pad}{json.dumps(str(k), ensure_ascii=False)}: {_encode(v, level + 1)}" for k, v in obj.items())
        return "{\n" + body + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        if len(obj) == 0:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in obj):
            return "[" + ", ".join(_encode(v, level + 1) for v in obj) + "]"
        body = ",\n".join(pad + _encode(v, level + 1) for v in obj)
        return "[\n" + body + "\n" + end + "]"
    raise TypeError(f"cannot encode {type(obj).__name__}")


def dump_json(obj):
    """JSON text with insertion-ordered keys, 17 significant digits and null for inf/nan."""
    return _encode(obj, 0) + "\n"


def write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def tree_to_dot(tree, report):
    """Graphviz DOT of the tree with every edge styled by the child's label."""
    lines = [f"digraph {json.dumps(tree.name)} {{", "  rankdir=LR;", "  node [shape=circle];"]
    for nid in bfs_order(tree):
        lines.append(f"  {json.dumps(nid)};")
    for nid in bfs_order(tree)[1:]:
        label = report.node_labels[nid].label
        lines.append(f"  {json.dumps(tree.nodes[nid].parent)} -> {json.dumps(nid)} [{DOT_STYLES[label]}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def _sweep_point(args):
    tree, gamma, solver, c2_rule = args
    tree = with_gamma(tree, gamma)
    if solver == "benders":
        try:
            outcome = solve_benders(tree)
        except IterationLimit as e:
            outcome = e.outcome
    else:
        outcome = solve_extensive(tree)
    summary = classify(tree, outcome, c2_rule).summary()
    return {
        "gamma": gamma,
        "objective": outcome.objective,
        "n_effective_paths": summary["n_effective_paths"],
        "n_ineffective": summary["n_ineffective"],
        "n_unidentified": summary["n_unidentified"],
    }


def sweep(tree, gammas, solver="extensive", jobs=1, c2_rule="c2_only"):
    """Solves and classifies the tree for each uniform gamma.

    Args:
        tree (ScenarioTree): The instance.
        gammas (list): Radii applied to every stage.
        solver (str, optional): "extensive" or "benders".
        jobs (int, optional): Worker processes.
        c2_rule (str, optional): See effectiveness.classify_node_children.

    Returns:
        pandas.DataFrame: One row per gamma.
    """
    rows = parallel_map(_sweep_point, [(tree, g, solver, c2_rule) for g in gammas], jobs)
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


def sweep_to_csv(frame):
    return frame.to_csv(index=False, float_format="%.17g", lineterminator="\n")
