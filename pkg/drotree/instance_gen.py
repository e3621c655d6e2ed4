"""Seeded instance generators.

Random numbers come from SplitMix64 (constants below) so that any
implementation of the same recipe reproduces the same instances.
"""
import numpy as np

from drotree.errors import ParamOutOfRange
from drotree.solver import node_blocks
from drotree.stage_model import Coef, StageTemplate, TemplateRow
from drotree.tree import ScenarioTree, TreeNode, validate

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB

SLACK_COST = 50.0

# water analog: stage -> level -> (supply, demand)
WATER_LEVELS = {
    1: {"supply": 10.0, "demand": 8.0},
    2: {"supply": {"L": 6.0, "H": 12.0}, "demand": {"L": 7.0, "H": 11.0}},
    3: {"supply": {"L": 5.0, "H": 10.0}, "demand": {"L": 14.0, "H": 18.0}},
}
WATER_COSTS = [1.0, 2.0, 10.0, 0.5]  # alloc, recycle, external, store
WATER_STORE_CAP = 3.0
WATER_RECYCLE = {"D": 0.0, "N": 0.3}
WATER_JITTER = 0.02


class SplitMix64:
    def __init__(self, seed):
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ParamOutOfRange(f"seed must be a non-negative integer, got {seed!r}")
        self.state = seed & MASK64

    def next_u64(self):
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * MIX1) & MASK64
        z = ((z ^ (z >> 27)) * MIX2) & MASK64
        return z ^ (z >> 31)

    def uniform(self, lo=0.0, hi=1.0):
        """53-bit uniform on [lo, hi)."""
        return lo + (hi - lo) * ((self.next_u64() >> 11) * 2.0**-53)


def gen_random(seed, T=3, branching=2, gamma=0.5, n_vars=2, dependence=0.0):
    """Random feasible, bounded multistage LP on a uniform scenario tree.

    Each stage has n_vars decisions and n_vars covering rows
    a.x_t + b.x_{t-1} + slack >= s*xi[d] + o, every row with its own
    slack at cost 50, so any parent decision admits a recourse.

    Args:
        seed (int): PRNG seed.
        T (int, optional): Number of stages, 2 to 4.
        branching (int, optional): Children per internal node, 1 to 4.
        gamma (float or list, optional): Radius, uniform or per stage.
        n_vars (int, optional): Decisions per stage, 1 to 3.
        dependence (float, optional): Weight in [0, 1] of the parent's
            demand in each child's demand.

    Returns:
        ScenarioTree: The validated instance.
    """
    if T not in (2, 3, 4):
        raise ParamOutOfRange(f"T must be 2, 3 or 4, got {T!r}")
    if not isinstance(branching, int) or not 1 <= branching <= 4:
        raise ParamOutOfRange(f"branching must be in 1..4, got {branching!r}")
    if not isinstance(n_vars, int) or not 1 <= n_vars <= 3:
        raise ParamOutOfRange(f"n_vars must be in 1..3, got {n_vars!r}")
    if not 0.0 <= dependence <= 1.0:
        raise ParamOutOfRange(f"dependence must be in [0, 1], got {dependence!r}")
    gammas = _gamma_list(gamma, T)

    rng = SplitMix64(seed)
    templates = [_random_template(rng, t, n_vars) for t in range(1, T + 1)]

    root = TreeNode("s1_0", 1, None, 1.0, _random_xi(rng, None, dependence))
    nodes = [root]
    frontier = [root]
    for t in range(2, T + 1):
        nxt = []
        for par in frontier:
            weights = [1.0 - 0.9 * rng.uniform() for _ in range(branching)]
            total = sum(weights)
            for w in weights:
                child = TreeNode(f"s{t}_{len(nxt)}", t, par.id, w / total, _random_xi(rng, par, dependence))
                nxt.append(child)
        nodes.extend(nxt)
        frontier = nxt

    tree = ScenarioTree(
        f"random_s{seed}_T{T}_b{branching}", T, gammas, nodes, templates, zero_feasible=True
    )
    return validate(tree)


def _random_template(rng, t, n):
    cost = [Coef(field="c")] + [Coef(rng.uniform(1.0, 5.0)) for _ in range(n - 1)]
    cost += [Coef(SLACK_COST)] * n
    rows = []
    for i in range(n):
        self_coefs = {j: Coef(rng.uniform(0.5, 2.0)) for j in range(n)}
        if i == 0:
            self_coefs[0] = Coef(field="a")
        self_coefs[n + i] = Coef(1.0)
        link = {j: Coef(rng.uniform(-0.5, 1.0)) for j in range(n)} if t > 1 else {}
        rhs = Coef(field="d", scale=rng.uniform(0.5, 1.5), offset=rng.uniform(0.0, 1.0))
        rows.append(TemplateRow(self_coefs, link, ">=", rhs))
    return StageTemplate(2 * n, cost, rows)


def _random_xi(rng, parent, dependence):
    fresh = rng.uniform(1.0, 10.0)
    d = fresh if parent is None else dependence * parent.xi["d"] + (1.0 - dependence) * fresh
    return {"d": d, "c": rng.uniform(1.0, 5.0), "a": rng.uniform(0.5, 2.0)}


def fallback_policy(tree):
    """A feasible policy for generated instances: decisions at zero, slacks cover each row."""
    policy = {}
    for nid, block in node_blocks(tree).items():
        n = block.n_vars // 2
        x = np.zeros(block.n_vars)
        x[n:] = np.maximum(block.rhs, 0.0)
        policy[nid] = x
    return policy


def gen_water_analog(seed=0, gamma=0.5, asymmetric=True, dependence=0.0):
    """Three-stage water allocation tree with eight equally likely children per node.

    Children are every (supply, demand, treatment facility) triplet with
    supply and demand Low/High and the facility Disrupted/Nondisrupted, in
    that nesting order. Stage decisions are [alloc, recycle, external, store]:
    demand is met by allocated supply, recycled water (a fraction of the
    allocation, none when disrupted) and expensive external procurement;
    stored water adds to the next stage's supply.

    Args:
        seed (int, optional): Seed of the per-stage jitter on supply and demand.
        gamma (float or list, optional): Radius, uniform or per stage.
        asymmetric (bool, optional): Harsher third-stage supply and demand.
        dependence (float, optional): Weight in [0, 1] of the parent's
            supply, demand and facility state in each third-stage child's.

    Returns:
        ScenarioTree: 73 nodes, 64 scenario paths.
    """
    if not 0.0 <= dependence <= 1.0:
        raise ParamOutOfRange(f"dependence must be in [0, 1], got {dependence!r}")
    rng = SplitMix64(seed)
    gammas = _gamma_list(gamma, 3)
    levels = {1: dict(WATER_LEVELS[1]), 2: WATER_LEVELS[2], 3: WATER_LEVELS[3 if asymmetric else 2]}
    jitter = {}
    for t in (2, 3):
        jitter[t] = {
            key: 1.0 + WATER_JITTER * (2.0 * rng.uniform() - 1.0) for key in ("supply", "demand")
        }

    root = TreeNode("w1", 1, None, 1.0, {**levels[1], "frac": WATER_RECYCLE["N"]})
    nodes = [root]
    stage2 = []
    for label in _water_labels():
        node = TreeNode(f"w2_{label}", 2, "w1", 1.0 / 8.0, _water_xi(levels[2], jitter[2], label))
        stage2.append(node)
    nodes.extend(stage2)
    for par in stage2:
        for label in _water_labels():
            nodes.append(
                TreeNode(
                    f"w3_{par.id[3:]}_{label}",
                    3,
                    par.id,
                    1.0 / 8.0,
                    _water_xi(levels[3], jitter[3], label, par.id[3:], dependence),
                )
            )

    templates = [_water_template(t > 1) for t in (1, 2, 3)]
    name = f"water_s{seed}" + ("" if asymmetric else "_sym") + (f"_dep{dependence:g}" if dependence else "")
    return validate(ScenarioTree(name, 3, gammas, nodes, templates))


def _water_labels():
    return [s + d + f for s in "LH" for d in "LH" for f in "DN"]


def _water_xi(levels, jitter, label, parent_label=None, dependence=0.0):
    """Realization of a triplet label, pulled towards the parent's label by `dependence`."""
    s, d, f = label
    ps, pd, pf = parent_label or label
    w = dependence if parent_label else 0.0
    return {
        "supply": ((1.0 - w) * levels["supply"][s] + w * levels["supply"][ps]) * jitter["supply"],
        "demand": ((1.0 - w) * levels["demand"][d] + w * levels["demand"][pd]) * jitter["demand"],
        "frac": (1.0 - w) * WATER_RECYCLE[f] + w * WATER_RECYCLE[pf],
    }


def _water_template(linked):
    rows = [
        TemplateRow({0: Coef(1.0), 1: Coef(1.0), 2: Coef(1.0)}, {}, ">=", Coef(field="demand")),
        TemplateRow(
            {0: Coef(1.0), 3: Coef(1.0)}, {3: Coef(-1.0)} if linked else {}, "<=", Coef(field="supply")
        ),
        TemplateRow({0: Coef(field="frac", scale=-1.0), 1: Coef(1.0)}, {}, "<=", Coef(0.0)),
    ]
    bounds = [(Coef(0.0), None)] * 3 + [(Coef(0.0), Coef(WATER_STORE_CAP))]
    return StageTemplate(4, [Coef(c) for c in WATER_COSTS], rows, bounds)


def _gamma_list(gamma, T):
    if isinstance(gamma, (int, float)) and not isinstance(gamma, bool):
        gamma = [float(gamma)] * (T - 1)
    gamma = [float(g) for g in gamma]
    if len(gamma) != T - 1 or not all(0.0 <= g <= 1.0 for g in gamma):
        raise ParamOutOfRange(f"gamma must be in [0, 1] for each of {T - 1} stages, got {gamma}")
    return gamma
