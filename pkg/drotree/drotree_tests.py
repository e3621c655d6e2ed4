import json
import math
import os

import numpy as np
from absl.testing import absltest
from hypothesis import given, settings, strategies as st

from drotree.effectiveness import (
    EFFECTIVE,
    INEFFECTIVE,
    UNIDENTIFIED,
    CondLabel,
    classify,
    classify_node_children,
    classify_paths,
)
from drotree.errors import (
    InfeasiblePolicy,
    InstanceInfeasible,
    InstanceUnbounded,
    InvalidRemoval,
    IterationLimit,
    MissingXiField,
    MixedStages,
    ParamOutOfRange,
    ParseError,
    StageOutOfRange,
    UnknownNode,
    ValidationError,
)
from drotree.grid_parser import parse_genspec, parse_grid, parse_ids, parse_numbers
from drotree.instance_gen import SplitMix64, fallback_policy, gen_random, gen_water_analog
from drotree.lp import INFEASIBLE, OPTIMAL, UNBOUNDED, LinearProgram, solve_lp, to_lp_text
from drotree.main import classify_instance, run
from drotree.oracle import (
    assess_paths,
    assess_realizations,
    verify_monotonicity,
    verify_path_equivalence,
    verify_report,
    verify_union_intersection,
)
from drotree.solver import (
    NestedBenders,
    build_extensive,
    check_recursion,
    evaluate_policy,
    node_blocks,
    restriction_feasible,
    solve_benders,
    solve_extensive,
    solve_subtree,
    worst_case_path_probabilities,
)
from drotree.stage_model import check_zero_recourse, materialize
from drotree.tree import (
    ancestor_set,
    bfs_order,
    children,
    leaves,
    load_instance,
    path,
    path_probability,
    project,
    tree_from_dict,
    tree_to_dict,
    with_gamma,
)
from drotree.tv_risk import (
    C1,
    C2,
    C4,
    FiniteDist,
    categorize,
    cvar,
    psi,
    tv_distance,
    var_level,
    worst_case_expectation,
    worst_case_expectation_restricted,
)
from drotree.util import dump_json

DATA = os.path.join(os.path.dirname(os.path.abspath(__file__)), "testing_data")
THIRD = 1.0 / 3.0


def data_path(name):
    return os.path.join(DATA, name)


def load_json(name):
    with open(data_path(name), encoding="utf-8") as f:
        return json.load(f)


def fan_tree(values, probs, gamma):
    """Root with no cost and one leaf per value; each leaf costs exactly its value."""
    nodes = [{"id": "root", "stage": 1, "parent": None, "q": 1.0, "xi": {}}]
    for k, (h, q) in enumerate(zip(values, probs)):
        nodes.append({"id": f"c{k}", "stage": 2, "parent": "root", "q": q, "xi": {"h": h}})
    return tree_from_dict(
        {
            "name": "fan",
            "stages": 2,
            "gamma": [gamma],
            "nodes": nodes,
            "stage_templates": [
                {"n_vars": 1, "cost": [0.0], "rows": []},
                {
                    "n_vars": 1,
                    "cost": [{"xi": "h"}],
                    "rows": [{"self": {"0": 1.0}, "sense": ">=", "rhs": 1.0}],
                },
            ],
        }
    )


def risk_neutral_value(tree):
    """Expected-cost LP over the whole tree, built independently of the solver."""
    blocks = node_blocks(tree)
    lp = LinearProgram(name="risk_neutral")
    cols, prob = {}, {}
    for nid in bfs_order(tree):
        par = tree.nodes[nid].parent
        prob[nid] = 1.0 if par is None else prob[par] * tree.nodes[nid].q
        b = blocks[nid]
        cols[nid] = [lp.add_var(prob[nid] * b.cost[j], b.lower[j], b.upper[j]) for j in range(b.n_vars)]
    for nid in bfs_order(tree):
        b = blocks[nid]
        par = tree.nodes[nid].parent
        for i in range(b.n_rows):
            coefs = {cols[nid][j]: b.a_self[i, j] for j in range(b.n_vars)}
            if par is not None:
                for j in range(b.a_link.shape[1]):
                    coefs[cols[par][j]] = b.a_link[i, j]
            lp.add_row(coefs, b.senses[i], b.rhs[i])
    sol = solve_lp(lp)
    assert sol.optimal
    return sol.objective_value


def rel_close(a, b, tol=1e-6):
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


class TestTreeCore(absltest.TestCase):
    def test_load_minimal(self):
        tree = load_instance(data_path("newsvendor.json"))
        self.assertEqual(tree.T, 2)
        self.assertLen(tree.nodes, 3)
        self.assertEqual(tree.root, "root")

    def test_probability_sum_names_parent(self):
        with self.assertRaises(ValidationError) as ctx:
            load_instance(data_path("bad_probability.json"))
        self.assertEqual(ctx.exception.node, "root")
        self.assertEqual(ctx.exception.rule, "probability_sum")

    def test_malformed_instances(self):
        with self.assertRaises(ParseError):
            tree_from_dict({"stages": 2})
        broken = self.create_tempfile(content="{not json").full_path
        with self.assertRaises(ParseError):
            load_instance(broken)

    def test_gamma_out_of_range(self):
        data = load_json("newsvendor.json")
        data["gamma"] = [1.5]
        with self.assertRaises(ValidationError) as ctx:
            tree_from_dict(data)
        self.assertEqual(ctx.exception.rule, "gamma_range")

    def test_orphan_node(self):
        data = load_json("newsvendor.json")
        data["nodes"][2]["parent"] = "nowhere"
        with self.assertRaises(ValidationError) as ctx:
            tree_from_dict(data)
        self.assertEqual(ctx.exception.rule, "orphan")

    def test_link_index_checked_at_load(self):
        with self.assertRaises(ValidationError) as ctx:
            load_instance(data_path("bad_link.json"))
        self.assertEqual(ctx.exception.rule, "link_index")

    def test_children(self):
        tree = load_instance(data_path("binary_tree.json"))
        self.assertEqual(children(tree, "r"), ["a", "b"])
        self.assertEqual(children(tree, "bb"), [])
        with self.assertRaises(UnknownNode):
            children(tree, "zz")

    def test_project(self):
        tree = load_instance(data_path("binary_tree.json"))
        for leaf in leaves(tree):
            self.assertEqual(project(tree, leaf, 1), "r")
            self.assertEqual(project(tree, leaf, 3), leaf)
            for t in (2, 3):
                self.assertEqual(tree.nodes[project(tree, leaf, t)].parent, project(tree, leaf, t - 1))
        self.assertEqual(project(tree, leaves(tree)[3], 2), "b")
        with self.assertRaises(StageOutOfRange):
            project(tree, "bb", 4)
        with self.assertRaises(StageOutOfRange):
            project(tree, "a", 1)

    def test_ancestor_set(self):
        tree = load_instance(data_path("binary_tree.json"))
        self.assertEqual(ancestor_set(tree, ["aa", "ab"]), {"a"})
        self.assertEqual(ancestor_set(tree, []), set())
        self.assertEqual(ancestor_set(tree, leaves(tree)), {"a", "b"})
        with self.assertRaises(MixedStages):
            ancestor_set(tree, ["a", "aa"])
        for nid in bfs_order(tree)[1:]:
            self.assertIn(nid, children(tree, next(iter(ancestor_set(tree, [nid])))))

    def test_path_probabilities_sum_to_one(self):
        for tree in (load_instance(data_path("binary_tree.json")), gen_random(3, 4, 3)):
            total = sum(path_probability(tree, leaf) for leaf in leaves(tree))
            self.assertAlmostEqual(total, 1.0, delta=1e-9)

    def test_with_gamma(self):
        tree = load_instance(data_path("binary_tree.json"))
        self.assertEqual(with_gamma(tree, 0.7).gamma, [0.7, 0.7])
        self.assertEqual(with_gamma(tree, [0.1, 0.2]).gamma, [0.1, 0.2])
        self.assertEqual(tree.gamma, [0.3, 0.3])
        with self.assertRaises(ValidationError):
            with_gamma(tree, [0.1])

    def test_round_trip_through_dict(self):
        tree = load_instance(data_path("binary_tree.json"))
        again = tree_from_dict(tree_to_dict(tree))
        self.assertEqual(dump_json(tree_to_dict(tree)), dump_json(tree_to_dict(again)))


class TestLpEngine(absltest.TestCase):
    def test_binding_row_dual(self):
        lp = LinearProgram()
        x = lp.add_var(1.0)
        lp.add_row({x: 1.0}, ">=", 1.0)
        sol = solve_lp(lp)
        self.assertEqual(sol.status, OPTIMAL)
        self.assertAlmostEqual(sol.objective_value, 1.0)
        self.assertAlmostEqual(sol.duals[0], 1.0)

    def test_unbounded(self):
        lp = LinearProgram()
        lp.add_var(-1.0)
        self.assertEqual(solve_lp(lp).status, UNBOUNDED)

    def test_infeasible(self):
        lp = LinearProgram()
        x = lp.add_var(0.0)
        lp.add_row({x: 1.0}, "<=", -1.0)
        self.assertEqual(solve_lp(lp).status, INFEASIBLE)

    def test_free_and_bounded_variables(self):
        lp = LinearProgram()
        x = lp.add_var(1.0, None, None)
        y = lp.add_var(-1.0, -2.0, 3.0)
        lp.add_row({x: 1.0, y: -1.0}, ">=", -4.0)
        sol = solve_lp(lp)
        self.assertTrue(sol.optimal)
        np.testing.assert_allclose(sol.primal, [-1.0, 3.0], atol=1e-9)
        self.assertAlmostEqual(sol.objective_value, -4.0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=0, max_value=2**31 - 1))
    def test_strong_duality(self, seed):
        rng = np.random.default_rng(seed)
        m, n = (int(k) for k in rng.integers(2, 13, size=2))
        A = rng.uniform(-5.0, 5.0, (m, n))
        x0 = rng.uniform(0.5, 2.0, n)
        b = A @ x0 - rng.uniform(0.0, 1.0, m)
        c = rng.uniform(0.0, 5.0, n)
        primal = LinearProgram(list(c))
        for i in range(m):
            primal.add_row(dict(enumerate(A[i])), ">=", b[i])
        sol = solve_lp(primal)
        self.assertTrue(sol.optimal)
        obj = sol.objective_value
        scale = max(1.0, abs(obj))
        y = sol.duals
        self.assertGreaterEqual(y.min(), -1e-9)
        self.assertLessEqual(float(np.max(A.T @ y - c)), 1e-7 * scale)
        self.assertLessEqual(abs(float(b @ y) - obj), 1e-7 * scale)
        self.assertLessEqual(float(np.max(np.abs(y * (A @ sol.primal - b)))), 1e-7 * scale)

        dual = LinearProgram(list(-b))
        for j in range(n):
            dual.add_row(dict(enumerate(A[:, j])), "<=", c[j])
        dsol = solve_lp(dual)
        self.assertTrue(dsol.optimal)
        self.assertLessEqual(abs(dsol.objective_value + obj), 1e-7 * scale)

    def test_lp_text(self):
        lp, _ = build_extensive(load_instance(data_path("newsvendor.json")))
        text = to_lp_text(lp)
        self.assertIn("Minimize", text)
        self.assertIn("Subject To", text)
        self.assertTrue(text.endswith("End\n"))


class TestTvRisk(absltest.TestCase):
    def setUp(self):
        self.dist = FiniteDist([1.0, 2.0, 3.0], [THIRD, THIRD, THIRD])

    def test_psi(self):
        self.assertAlmostEqual(psi(self.dist, 2.0), 2.0 / 3.0)
        self.assertEqual(psi(self.dist, 0.5), 0.0)
        self.assertAlmostEqual(psi(self.dist, 3.0), 1.0)

    def test_var_level(self):
        self.assertEqual(var_level(self.dist, 0.5), 2.0)
        self.assertEqual(var_level(self.dist, 0.0), 1.0)
        self.assertEqual(var_level(self.dist, 1.0), 3.0)

    def test_cvar(self):
        self.assertAlmostEqual(cvar(self.dist, 0.0), 2.0)
        self.assertAlmostEqual(cvar(self.dist, 1.0), 3.0)
        self.assertAlmostEqual(cvar(self.dist, 0.5), 8.0 / 3.0)

    def test_worst_case_example(self):
        res = worst_case_expectation(self.dist, 0.5)
        self.assertAlmostEqual(res.value, 17.0 / 6.0)
        np.testing.assert_allclose(res.dist, [0.0, 1.0 / 6.0, 5.0 / 6.0], atol=1e-12)
        self.assertTrue(res.tight)

    def test_worst_case_extremes(self):
        res = worst_case_expectation(self.dist, 0.0)
        self.assertAlmostEqual(res.value, 2.0)
        np.testing.assert_allclose(res.dist, self.dist.probs)
        res = worst_case_expectation(self.dist, 1.0)
        self.assertEqual(res.value, 3.0)
        np.testing.assert_allclose(res.dist, [0.0, 0.0, 1.0], atol=1e-12)

    def test_restricted(self):
        res = worst_case_expectation_restricted(self.dist, 0.5, [1])
        self.assertAlmostEqual(res.value, 16.0 / 6.0, delta=1e-9)
        np.testing.assert_allclose(res.dist, [1.0 / 6.0, 0.0, 5.0 / 6.0], atol=1e-9)
        self.assertFalse(worst_case_expectation_restricted(self.dist, 0.5, [0, 1, 2]).feasible)
        self.assertTrue(math.isinf(worst_case_expectation_restricted(self.dist, 0.2, [0]).value))

    def test_restricted_zero_mass_child(self):
        dist = FiniteDist([1.0, 2.0, 3.0], [0.0, 0.5, 0.5])
        for gamma in (0.0, 0.3, 1.0):
            self.assertAlmostEqual(
                worst_case_expectation_restricted(dist, gamma, [0]).value,
                worst_case_expectation(dist, gamma).value,
                delta=1e-9,
            )

    def test_categorize(self):
        cats = categorize(self.dist, 0.5)
        self.assertEqual(cats.labels, [C1, C2, C4])
        self.assertEqual(cats.var_level, 2.0)
        self.assertEqual(cats.sup_level, 3.0)
        self.assertEqual(categorize(FiniteDist([4.0, 4.0], [0.5, 0.5]), 0.5).labels, [C4, C4])
        cats = categorize(FiniteDist([0.0, 10.0], [0.9, 0.1]), 0.05)
        self.assertEqual(cats.labels, [C2, C4])
        self.assertEqual(cats.var_level, 0.0)

    def test_bad_distributions(self):
        with self.assertRaises(ValidationError):
            FiniteDist([1.0, 2.0], [0.5, 0.6])
        with self.assertRaises(ValidationError):
            FiniteDist([1.0], [1.0, 0.0])
        with self.assertRaises(ParamOutOfRange):
            worst_case_expectation(self.dist, 1.5)

    @settings(max_examples=1000, deadline=None)
    @given(st.integers(min_value=0, max_value=2**31 - 1))
    def test_closed_form_matches_lp(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 11))
        q = rng.dirichlet(np.ones(n))
        q = q / q.sum()
        q[-1] = 1.0 - q[:-1].sum()
        q = np.maximum(q, 0.0)
        dist = FiniteDist(rng.uniform(-10.0, 10.0, n), q)
        gamma = float(rng.uniform())
        res = worst_case_expectation(dist, gamma)
        lp_value = worst_case_expectation_restricted(dist, gamma, []).value
        self.assertLessEqual(abs(res.value - lp_value), 1e-8)
        p = res.dist
        self.assertGreaterEqual(p.min(), 0.0)
        self.assertAlmostEqual(p.sum(), 1.0, delta=1e-10)
        self.assertLessEqual(tv_distance(p, q), gamma + 1e-10)
        self.assertAlmostEqual(float(p @ dist.values), res.value, delta=1e-9)
        self.assertLessEqual(float(q @ dist.values), res.value + 1e-12)
        self.assertLessEqual(res.value, dist.values.max() + 1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(min_value=0, max_value=2**31 - 1))
    def test_cvar_matches_scan(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 9))
        q = rng.dirichlet(np.ones(n))
        q[-1] = 1.0 - q[:-1].sum()
        q = np.maximum(q, 0.0)
        dist = FiniteDist(rng.uniform(-5.0, 5.0, n), q)
        alpha = float(rng.uniform(0.0, 0.95))
        scan = min(
            eta + float(q @ np.maximum(dist.values - eta, 0.0)) / (1.0 - alpha) for eta in dist.values
        )
        self.assertAlmostEqual(cvar(dist, alpha), scan, delta=1e-9)

    def test_monotone_in_gamma(self):
        dist = FiniteDist([3.0, -1.0, 7.0, 2.0], [0.1, 0.4, 0.2, 0.3])
        values = [worst_case_expectation(dist, g).value for g in np.linspace(0.0, 1.0, 21)]
        self.assertTrue(all(b >= a - 1e-12 for a, b in zip(values, values[1:])))
        self.assertAlmostEqual(values[0], float(dist.probs @ dist.values))
        self.assertEqual(values[-1], 7.0)


class TestStageModel(absltest.TestCase):
    def _tree(self, cost, rhs, xi):
        return tree_from_dict(
            {
                "name": "stage",
                "stages": 2,
                "gamma": [0.5],
                "nodes": [
                    {"id": "root", "stage": 1, "parent": None, "q": 1.0, "xi": {}},
                    {"id": "leaf", "stage": 2, "parent": "root", "q": 1.0, "xi": xi},
                ],
                "stage_templates": [
                    {"n_vars": 1, "cost": [1.0], "rows": []},
                    {
                        "n_vars": 1,
                        "cost": [cost],
                        "rows": [{"self": {"0": 1.0}, "link": {"0": -1.0}, "sense": "<=", "rhs": rhs}],
                    },
                ],
            }
        )

    def test_affine_cost(self):
        tree = self._tree({"xi": "demand", "scale": 2, "offset": 0}, 1.0, {"demand": 3.0})
        np.testing.assert_allclose(materialize(tree, "leaf").cost, [6.0])

    def test_xi_rhs(self):
        tree = self._tree(1.0, {"xi": "supply"}, {"supply": 10.0})
        block = materialize(tree, "leaf")
        np.testing.assert_allclose(block.rhs, [10.0])
        np.testing.assert_allclose(block.shifted_rhs([2.0]), [12.0])

    def test_missing_field(self):
        tree = self._tree({"xi": "flow"}, 1.0, {"demand": 3.0})
        with self.assertRaises(MissingXiField) as ctx:
            materialize(tree, "leaf")
        self.assertEqual(ctx.exception.field, "flow")

    def test_generated_instances_have_zero_recourse(self):
        for seed in range(3):
            tree = gen_random(seed, 3, 2)
            self.assertTrue(tree.zero_feasible)
            self.assertEqual(check_zero_recourse(tree), [])


class TestDroSolver(absltest.TestCase):
    def test_newsvendor(self):
        tree = load_instance(data_path("newsvendor.json"))
        outcome = solve_extensive(tree)
        self.assertAlmostEqual(outcome.objective, 3.0, delta=1e-9)
        self.assertAlmostEqual(outcome.policy["root"][0], 3.0, delta=1e-9)
        self.assertAlmostEqual(outcome.objective, risk_neutral_value(tree), delta=1e-9)
        # minimax: min over x of x + 3 * max(3 - x, 0)
        self.assertAlmostEqual(solve_extensive(with_gamma(tree, 1.0)).objective, 3.0, delta=1e-9)

    def test_chain(self):
        tree = load_instance(data_path("chain.json"))
        self.assertAlmostEqual(solve_extensive(tree).objective, 3.0, delta=1e-9)
        outcome = solve_benders(tree)
        self.assertAlmostEqual(outcome.objective, 3.0, delta=1e-9)
        self.assertLessEqual(outcome.iterations, 2)
        self.assertLessEqual(outcome.gap, 1e-6)

    def test_minimax_two_stage(self):
        tree = with_gamma(load_instance(data_path("binary_tree.json")), 1.0)
        outcome = solve_extensive(tree)
        self.assertLess(check_recursion(tree, outcome), 1e-6)
        for nid in ("a", "b"):
            kids = children(tree, nid)
            worst = max(outcome.q_values[c] for c in kids)
            stage = node_blocks(tree)[nid].stage_cost(outcome.policy[nid])
            self.assertAlmostEqual(outcome.q_values[nid], stage + worst, delta=1e-9)

    def test_risk_neutral_matches_expectation_lp(self):
        for seed in range(4):
            tree = gen_random(seed, 3, 2, gamma=0.0)
            self.assertTrue(rel_close(solve_extensive(tree).objective, risk_neutral_value(tree)))

    def test_recursion_and_time_consistency(self):
        for seed in range(3):
            tree = gen_random(seed, 3, 3, gamma=0.4, n_vars=2)
            outcome = solve_extensive(tree)
            self.assertLess(check_recursion(tree, outcome), 1e-6)
            self.assertTrue(rel_close(outcome.q_values[tree.root], outcome.objective))
            for nid in bfs_order(tree)[1:11]:
                par_x = outcome.policy[tree.nodes[nid].parent]
                sub = solve_subtree(tree, nid, par_x)
                self.assertTrue(rel_close(sub.objective, outcome.q_values[nid]), nid)

    def test_benders_matches_extensive(self):
        gammas = (0.0, 0.2, 0.5, 0.8, 1.0)
        for seed in range(50):
            T, branching = 2 + seed % 3, 1 + (seed // 3) % 4
            tree = gen_random(seed, T, branching, gamma=gammas[seed % 5], n_vars=1 + seed % 2)
            with self.subTest(seed=seed, T=T, branching=branching):
                ext = solve_extensive(tree)
                ben = solve_benders(tree)
                self.assertTrue(rel_close(ext.objective, ben.objective), (ext.objective, ben.objective))
                self.assertLessEqual(ben.gap, 1e-6 * max(1.0, abs(ben.objective)))
                self.assertLess(check_recursion(tree, ben), 1e-6)

    def test_benders_feasibility_cuts(self):
        tree = load_instance(data_path("recourse_cut.json"))
        self.assertAlmostEqual(solve_extensive(tree).objective, 5.0, delta=1e-9)
        benders = NestedBenders(tree)
        outcome = benders.run()
        self.assertAlmostEqual(outcome.objective, 5.0, delta=1e-6)
        self.assertNotEmpty(benders.feas_cuts["root"])
        self.assertGreaterEqual(outcome.policy["root"][0], 4.0 - 1e-9)

    def test_benders_negative_costs(self):
        # the cost-to-go sits far below any fixed floor
        tree = load_instance(data_path("negative_costs.json"))
        self.assertTrue(rel_close(solve_extensive(tree).objective, -1.5e6))
        benders = NestedBenders(tree)
        self.assertLessEqual(benders.phi_lower["root"], -2.0e6)
        outcome = benders.run()
        self.assertTrue(rel_close(outcome.objective, -1.5e6), outcome.objective)
        self.assertAlmostEqual(outcome.policy["root"][0], 2.0e6, delta=1.0)

    def test_benders_unbounded_recourse(self):
        data = load_json("negative_costs.json")
        del data["stage_templates"][1]["bounds"]
        tree = tree_from_dict(data)
        with self.assertRaises(InstanceUnbounded):
            solve_extensive(tree)
        with self.assertRaises(InstanceUnbounded):
            solve_benders(tree)

    def test_benders_iteration_limit(self):
        tree = load_instance(data_path("binary_tree.json"))
        with self.assertRaises(IterationLimit) as ctx:
            solve_benders(tree, max_iter=1)
        best = ctx.exception.outcome
        self.assertGreater(best.gap, 0.0)
        self.assertGreaterEqual(best.objective, solve_extensive(tree).objective - 1e-9)

    def test_infeasible_instance(self):
        tree = load_instance(data_path("infeasible.json"))
        with self.assertRaises(InstanceInfeasible):
            solve_extensive(tree)
        with self.assertRaises(InstanceInfeasible):
            solve_benders(tree)

    def test_evaluate_policy(self):
        tree = gen_random(5, 3, 2, gamma=0.5)
        outcome = solve_extensive(tree)
        values = evaluate_policy(tree, outcome.policy)
        self.assertTrue(rel_close(values[tree.root], outcome.objective))

        zero = evaluate_policy(tree, fallback_policy(tree))
        self.assertTrue(math.isfinite(zero[tree.root]))
        self.assertGreaterEqual(zero[tree.root], outcome.objective - 1e-9)

        perturbed = {nid: x.copy() for nid, x in outcome.policy.items()}
        n = len(perturbed[tree.root]) // 2
        perturbed[tree.root][n] += 1.0
        self.assertGreaterEqual(evaluate_policy(tree, perturbed)[tree.root], outcome.objective - 1e-9)

        broken = {nid: np.zeros_like(x) for nid, x in outcome.policy.items()}
        with self.assertRaises(InfeasiblePolicy):
            evaluate_policy(tree, broken)

    def test_objective_nondecreasing_in_gamma(self):
        tree = gen_random(2, 3, 3)
        values = [solve_extensive(with_gamma(tree, g)).objective for g in (0.0, 0.25, 0.5, 0.75, 1.0)]
        self.assertTrue(all(b >= a - 1e-7 * max(1.0, abs(a)) for a, b in zip(values, values[1:])))

    def test_outcome_export(self):
        tree = load_instance(data_path("binary_tree.json"))
        outcome = solve_extensive(tree)
        probs = worst_case_path_probabilities(tree, outcome)
        self.assertAlmostEqual(sum(probs.values()), 1.0, delta=1e-9)
        data = outcome.to_dict(tree)
        self.assertEqual(list(data), ["objective", "solver", "gap", "iterations", "nodes"])
        self.assertEqual([n["id"] for n in data["nodes"]], bfs_order(tree))
        self.assertEqual(list(data["nodes"][0]["worst_case_children"]), ["a", "b"])


class TestEffectiveness(absltest.TestCase):
    def _labels(self, values, probs, gamma, c2_rule="c2_only"):
        tree = fan_tree(values, probs, gamma)
        outcome = solve_extensive(tree)
        return classify_node_children(outcome, tree, "root", c2_rule)

    def test_half_radius(self):
        labels = self._labels([1.0, 2.0, 3.0], [THIRD] * 3, 0.5)
        self.assertEqual([c.label for c in labels], [INEFFECTIVE, UNIDENTIFIED, EFFECTIVE])
        self.assertEqual([c.category for c in labels], [C1, C2, C4])

    def test_var_boundary(self):
        labels = self._labels([1.0, 2.0, 3.0], [THIRD] * 3, THIRD)
        self.assertEqual([c.label for c in labels], [INEFFECTIVE, EFFECTIVE, EFFECTIVE])
        self.assertEqual(labels[0].reason, "C2_mass_equals_gamma")
        self.assertEqual(labels[1].reason, "C3_between")

    def test_single_c2_above_gamma(self):
        labels = self._labels([0.5, 10.0], [0.9, 0.1], 0.05)
        self.assertEqual([c.label for c in labels], [EFFECTIVE, EFFECTIVE])
        self.assertEqual(labels[0].reason, "C2_single_exceeds_gamma")

    def test_unidentified_regimes(self):
        labels = self._labels([1.0, 2.0, 3.0], [0.0, 0.5, 0.5], 0.3)
        self.assertTrue(all(c.label == UNIDENTIFIED and c.reason == "zero_probability" for c in labels))
        for gamma in (0.0, 1.0):
            labels = self._labels([1.0, 2.0, 3.0], [THIRD] * 3, gamma)
            self.assertTrue(all(c.reason == "gamma_boundary" for c in labels))

    def test_tied_maxima(self):
        labels = self._labels([1.0, 3.0, 3.0], [0.2, 0.4, 0.4], 0.3)
        self.assertEqual([c.label for c in labels], [INEFFECTIVE, EFFECTIVE, EFFECTIVE])
        labels = self._labels([3.0, 3.0], [0.5, 0.5], 0.5)
        self.assertEqual([c.reason for c in labels], ["C4_tied_slack", "C4_tied_slack"])

    def test_shift_invariance(self):
        base = self._labels([1.0, 2.0, 3.0, 2.5], [0.1, 0.2, 0.3, 0.4], 0.25)
        shifted = self._labels([6.0, 7.0, 8.0, 7.5], [0.1, 0.2, 0.3, 0.4], 0.25)
        self.assertEqual([c.label for c in base], [c.label for c in shifted])

    def test_leaf_is_rejected(self):
        tree = fan_tree([1.0, 2.0], [0.5, 0.5], 0.5)
        outcome = solve_extensive(tree)
        with self.assertRaises(StageOutOfRange):
            classify_node_children(outcome, tree, "c0")
        with self.assertRaises(ParamOutOfRange):
            classify_node_children(outcome, tree, "root", "nope")

    def test_path_labels(self):
        tree = load_instance(data_path("binary_tree.json"))
        outcome = solve_extensive(tree)
        labels = {
            "a": CondLabel("a", INEFFECTIVE, C1, "C1_below_var"),
            "b": CondLabel("b", EFFECTIVE, C4, "C4_sup"),
            "aa": CondLabel("aa", UNIDENTIFIED, C2, "C2_unresolved"),
            "ab": CondLabel("ab", EFFECTIVE, C4, "C4_sup"),
            "ba": CondLabel("ba", UNIDENTIFIED, C2, "C2_unresolved"),
            "bb": CondLabel("bb", EFFECTIVE, C4, "C4_sup"),
        }
        paths = classify_paths(outcome, tree, labels)
        self.assertEqual(paths["aa"].label, INEFFECTIVE)
        self.assertEqual(paths["aa"].witness, "a")
        self.assertEqual(paths["ab"].label, INEFFECTIVE)
        self.assertEqual(paths["ba"].label, UNIDENTIFIED)
        self.assertEqual(paths["bb"].label, EFFECTIVE)
        self.assertIsNone(paths["bb"].witness)

    def test_report(self):
        tree = load_instance(data_path("binary_tree.json"))
        report = classify(tree, solve_extensive(tree))
        data = report.to_dict()
        self.assertEqual([n["id"] for n in data["nodes"]], bfs_order(tree)[1:])
        self.assertEqual([n["id"] for n in data["leaves"]], leaves(tree))
        summary = data["summary"]
        self.assertEqual(
            summary["n_effective_paths"] + summary["n_ineffective"] + summary["n_unidentified"], 4
        )
        self.assertAlmostEqual(sum(leaf["worst_case_prob"] for leaf in data["leaves"]), 1.0, delta=1e-9)

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        gammas = (0.1, 0.3, 0.5, 0.7, 0.9)
        cls.solved = []
        for seed in range(30):
            tree = gen_random(seed, 3, 2 + seed % 3, gamma=gammas[seed % 5], n_vars=1 + seed % 2)
            cls.solved.append((seed, tree, solve_extensive(tree)))

    def test_oracle_agrees_on_random_instances(self):
        checked = 0
        for seed, tree, outcome in self.solved:
            for c2_rule in ("c2_only", "c1_plus_c2"):
                report = classify(tree, outcome, c2_rule)
                check = verify_report(tree, report, outcome)
                self.assertEqual(check["disagreements"], [], (seed, c2_rule))
                checked += check["checked_realizations"] + check["checked_paths"]
        self.assertGreater(checked, 0)

    def test_path_verdict_matches_realizations(self):
        resolved = 0
        for seed, tree, outcome in self.solved:
            for leaf in leaves(tree):
                result = verify_path_equivalence(tree, outcome, leaf)
                if not result["borderline"]:
                    self.assertTrue(result["holds"], (seed, result))
                    resolved += 1
        self.assertGreater(resolved, 0)

    def test_classify_instance_on_fixtures(self):
        for name in ("binary_tree.json", "chain.json"):
            report, outcome = classify_instance(data_path(name))
            tree = load_instance(data_path(name))
            self.assertEqual(list(report.path_labels), leaves(tree))
            self.assertEqual(list(report.node_labels), bfs_order(tree)[1:])
            self.assertAlmostEqual(report.objective, outcome.objective)
        self.assertEqual(report.node_labels["next"].label, EFFECTIVE)


class TestAssessmentOracle(absltest.TestCase):
    def setUp(self):
        self.tree = fan_tree([1.0, 2.0, 3.0], [THIRD] * 3, 0.5)
        self.outcome = solve_extensive(self.tree)

    def test_middle_realization(self):
        res = assess_realizations(self.tree, {"c1"}, self.outcome)["root"]
        self.assertAlmostEqual(res.baseline, 17.0 / 6.0, delta=1e-9)
        self.assertAlmostEqual(res.value, 16.0 / 6.0, delta=1e-9)
        self.assertEqual(res.verdict, EFFECTIVE)
        path_res = assess_paths(self.tree, {"c1"}, self.outcome)
        self.assertAlmostEqual(path_res.value, res.value, delta=1e-9)

    def test_removing_every_child_is_infeasible(self):
        res = assess_paths(self.tree, leaves(self.tree), self.outcome)
        self.assertTrue(res.infeasible)
        self.assertEqual(res.verdict, EFFECTIVE)
        self.assertIsNone(json.loads(dump_json(res.to_dict(self.tree)))["value"])

    def test_zero_mass_child(self):
        tree = fan_tree([1.0, 2.0, 3.0], [0.0, 0.5, 0.5], 0.3)
        outcome = solve_extensive(tree)
        res = assess_realizations(tree, {"c0"}, outcome)["root"]
        self.assertEqual(res.verdict, INEFFECTIVE)
        self.assertAlmostEqual(res.value, res.baseline, delta=1e-9)

    def test_invalid_removals(self):
        with self.assertRaises(InvalidRemoval):
            assess_paths(self.tree, set(), self.outcome)
        tree = load_instance(data_path("binary_tree.json"))
        outcome = solve_extensive(tree)
        with self.assertRaises(InvalidRemoval):
            assess_paths(tree, {"a"}, outcome)
        with self.assertRaises(MixedStages):
            assess_realizations(tree, {"a", "aa"}, outcome)
        with self.assertRaises(InvalidRemoval):
            verify_monotonicity(tree, {"aa", "ab"}, {"aa"}, outcome)

    def test_sandwich(self):
        for seed in range(3):
            tree = gen_random(seed, 3, 3, gamma=0.5)
            outcome = solve_extensive(tree)
            for leaf in leaves(tree)[:4]:
                res = assess_paths(tree, {leaf}, outcome)
                if res.infeasible:
                    continue
                eps = 1e-7 * max(1.0, abs(res.baseline))
                self.assertLessEqual(res.value, res.value_at_policy + eps)
                self.assertLessEqual(res.value_at_policy, res.baseline + eps)

    def test_conditional_sandwich(self):
        checked = 0
        for seed in range(3):
            tree = gen_random(seed, 3, 3, gamma=0.5)
            outcome = solve_extensive(tree)
            for nid in bfs_order(tree)[1:]:
                res = assess_realizations(tree, {nid}, outcome)[tree.nodes[nid].parent]
                if res.infeasible:
                    continue
                eps = 1e-7 * max(1.0, abs(res.baseline))
                self.assertLessEqual(res.value, res.value_at_policy + eps, (seed, nid))
                self.assertLessEqual(res.value_at_policy, res.baseline + eps, (seed, nid))
                checked += 1
        self.assertGreater(checked, 0)

    def test_untouched_subtrees_keep_their_values(self):
        checked = 0
        for seed in range(5):
            tree = gen_random(seed, 3, 3, gamma=0.5)
            removed = [leaves(tree)[0], leaves(tree)[-1]]
            groups = {tree.nodes[leaf].parent: {leaf} for leaf in removed}
            if not restriction_feasible(tree, groups):
                continue
            restricted = solve_subtree(tree, tree.root, restricted=groups, polish=True)
            touched = {nid for leaf in removed for nid in path(tree, leaf)}
            for nid in bfs_order(tree):
                if nid in touched:
                    continue
                par_x = restricted.policy[tree.nodes[nid].parent]
                fresh = solve_subtree(tree, nid, par_x)
                self.assertTrue(rel_close(restricted.q_values[nid], fresh.objective, 1e-7), (seed, nid))
                checked += 1
        self.assertGreater(checked, 0)

    def test_ineffective_subsets(self):
        tree = fan_tree([1.0, 2.0, 3.0, 4.0], [0.25] * 4, 0.5)
        outcome = solve_extensive(tree)
        self.assertAlmostEqual(outcome.objective, 3.75, delta=1e-9)
        result = verify_union_intersection(tree, {"c3"}, {"c0", "c1"}, {"c2"}, outcome)
        self.assertEqual(
            result, {"union_effective": True, "intersection_ineffective": True, "subsets_ineffective": True}
        )
        self.assertAlmostEqual(assess_paths(tree, {"c2", "c3"}, outcome).value, 1.5, delta=1e-9)

    def test_classifier_ineffective_leaf_keeps_value(self):
        for seed in range(3):
            tree = gen_random(seed, 3, 3, gamma=0.5)
            outcome = solve_extensive(tree)
            report = classify(tree, outcome)
            for leaf in report.paths_with(INEFFECTIVE)[:2]:
                res = assess_paths(tree, {leaf}, outcome)
                self.assertLessEqual(abs(res.baseline - res.value), 1e-6 * max(1.0, abs(res.baseline)))

    def test_monotonicity(self):
        pairs = 0
        for seed in range(10):
            tree = gen_random(seed, 3, 2, gamma=0.6)
            outcome = solve_extensive(tree)
            rng = np.random.default_rng(seed)
            pool = leaves(tree)
            for _ in range(2):
                s2 = set(rng.choice(pool, size=int(rng.integers(2, len(pool))), replace=False))
                s1 = set(list(sorted(s2))[: int(rng.integers(1, len(s2)))])
                holds, v1, v2 = verify_monotonicity(tree, s1, s2, outcome)
                self.assertTrue(holds, (seed, sorted(s1), sorted(s2), v1, v2))
                pairs += 1
        self.assertEqual(pairs, 20)
        tree = gen_random(0, 3, 2, gamma=0.6)
        holds, v1, v2 = verify_monotonicity(tree, {leaves(tree)[0]}, {leaves(tree)[0]}, solve_extensive(tree))
        self.assertTrue(holds)
        self.assertEqual(v1, v2)

    def test_union_and_intersection(self):
        triples = 0
        for seed in range(10):
            tree = gen_random(seed, 3, 3, gamma=0.5)
            outcome = solve_extensive(tree)
            verdicts = {leaf: assess_paths(tree, {leaf}, outcome) for leaf in leaves(tree)}
            eff = [leaf for leaf, r in verdicts.items() if r.verdict == EFFECTIVE and not r.borderline]
            ineff = [leaf for leaf, r in verdicts.items() if r.verdict == INEFFECTIVE]
            if not eff or not ineff:
                continue
            rng = np.random.default_rng(seed)
            s_any = set(rng.choice(leaves(tree), size=2, replace=False))
            result = verify_union_intersection(tree, {eff[0]}, {ineff[0]}, s_any, outcome)
            self.assertTrue(all(result.values()), (seed, result))
            triples += 1
        self.assertGreater(triples, 0)


class TestInstanceGen(absltest.TestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.water = gen_water_analog(0)

    def test_splitmix_reference(self):
        rng = SplitMix64(0)
        self.assertEqual(rng.next_u64(), 0xE220A8397B1DCDAF)
        self.assertEqual(rng.next_u64(), 0x6E789E6AA1B965F4)

    def test_random_is_deterministic(self):
        a = dump_json(tree_to_dict(gen_random(1, 2, 2)))
        b = dump_json(tree_to_dict(gen_random(1, 2, 2)))
        self.assertEqual(a, b)
        self.assertNotEqual(a, dump_json(tree_to_dict(gen_random(2, 2, 2))))

    @settings(max_examples=20, deadline=None)
    @given(
        st.integers(min_value=0, max_value=10**9),
        st.sampled_from([2, 3, 4]),
        st.integers(min_value=1, max_value=4),
        st.integers(min_value=1, max_value=3),
        st.floats(min_value=0.0, max_value=1.0),
    )
    def test_random_instances_are_valid(self, seed, T, branching, n_vars, dependence):
        tree = gen_random(seed, T, branching, 0.5, n_vars, dependence)
        self.assertLen(tree.nodes, sum(branching**k for k in range(T)))
        again = tree_from_dict(json.loads(dump_json(tree_to_dict(tree))))
        self.assertEqual(len(again.nodes), len(tree.nodes))

    def test_parameter_ranges(self):
        for kwargs in ({"T": 5}, {"branching": 0}, {"branching": 5}, {"n_vars": 4}, {"dependence": 2.0}):
            with self.assertRaises(ParamOutOfRange):
                gen_random(1, **kwargs)
        with self.assertRaises(ParamOutOfRange):
            gen_random(-1)

    def test_water_shape(self):
        tree = self.water
        self.assertLen(tree.nodes, 73)
        self.assertLen(leaves(tree), 64)
        labels = {nid[3:] for nid in children(tree, tree.root)}
        self.assertEqual(labels, {s + d + f for s in "LH" for d in "LH" for f in "DN"})
        self.assertLen(children(tree, "w2_LHD"), 8)
        self.assertIn("w3_LHD_LHD", tree.nodes)

    def test_water_dependence(self):
        self.assertEqual(
            dump_json(tree_to_dict(gen_water_analog(0, dependence=0.0))), dump_json(tree_to_dict(self.water))
        )
        tree = gen_water_analog(0, dependence=0.5)
        self.assertEqual(tree.name, "water_s0_dep0.5")
        self.assertEqual(tree.nodes["w3_LHD_LHD"].xi, self.water.nodes["w3_LHD_LHD"].xi)

        def supply_below(parent):
            return sum(tree.nodes[c].xi["supply"] for c in children(tree, parent))

        self.assertGreater(supply_below("w2_HHN"), supply_below("w2_LHN"))
        self.assertAlmostEqual(tree.nodes["w3_LHN_LHD"].xi["frac"], 0.15)
        self.assertEqual(tree.nodes["w2_LHD"].xi, self.water.nodes["w2_LHD"].xi)
        with self.assertRaises(ParamOutOfRange):
            gen_water_analog(0, dependence=1.5)

    def test_water_single_critical_path(self):
        for gamma in (0.9, 0.95):
            tree = with_gamma(self.water, gamma)
            report = classify(tree, solve_extensive(tree))
            self.assertEqual(report.paths_with(EFFECTIVE), ["w3_LHD_LHD"])
            self.assertEqual(report.summary()["n_unidentified"], 0)

    def test_water_patterns_differ_by_stage(self):
        tree = with_gamma(self.water, 0.05)
        report = classify(tree, solve_extensive(tree))

        def effective_labels(parent):
            return {
                c.split("_")[-1] for c in children(tree, parent) if report.node_labels[c].label == EFFECTIVE
            }

        stage2 = effective_labels(tree.root)
        stage3 = [effective_labels(nid) for nid in children(tree, tree.root)]
        self.assertTrue(any(s != stage2 for s in stage3))


class TestCommandLine(absltest.TestCase):
    def setUp(self):
        super().setUp()
        self.dir = self.create_tempdir().full_path

    def out(self, name):
        return os.path.join(self.dir, name)

    def read(self, name):
        with open(self.out(name), encoding="utf-8") as f:
            return f.read()

    def test_grids_and_lists(self):
        grid = parse_grid("0:1:0.05")
        self.assertLen(grid, 21)
        self.assertEqual(grid[0], 0.0)
        self.assertEqual(grid[1], 0.05)
        self.assertEqual(grid[-1], 1.0)
        self.assertEqual(parse_ids("w2_LHD, w3_LHD_LHD"), ["w2_LHD", "w3_LHD_LHD"])
        self.assertEqual(parse_genspec("7,3,2"), (7, 3, 2))
        self.assertEqual(parse_numbers("0.3,0.5"), [0.3, 0.5])
        for bad in ("0:1", "1:0:0.1", "a:b:c"):
            with self.assertRaises(ParseError):
                parse_grid(bad)
        with self.assertRaises(ParseError):
            parse_genspec("1,2")

    def test_generate_solve_classify(self):
        inst = self.out("inst.json")
        self.assertEqual(run(["gen", "--random", "4,3,2", "--gamma", "0.4", "--out", inst]), 0)
        self.assertEqual(run(["solve", inst, "--solver", "both", "--out", self.out("both.json")]), 0)
        both = json.loads(self.read("both.json"))
        self.assertLessEqual(both["relative_difference"], 1e-6)

        args = ["classify", inst, "--oracle", "--strict", "--jobs", "1", "--dot", self.out("tree.dot")]
        self.assertEqual(run(args + ["--out", self.out("r1.json")]), 0)
        self.assertEqual(run(args + ["--out", self.out("r2.json")]), 0)
        self.assertEqual(self.read("r1.json"), self.read("r2.json"))
        report = json.loads(self.read("r1.json"))
        self.assertEqual(report["oracle"]["disagreements"], [])
        self.assertIn("digraph", self.read("tree.dot"))

    def test_solve_writes_solution_and_lp(self):
        inst = data_path("newsvendor.json")
        code = run(["solve", inst, "--out", self.out("sol.json"), "--lp-dump", self.out("model.lp")])
        self.assertEqual(code, 0)
        sol = json.loads(self.read("sol.json"))
        self.assertAlmostEqual(sol["objective"], 3.0, delta=1e-9)
        self.assertEqual(sol["solver"], "Extensive")
        self.assertIn("Subject To", self.read("model.lp"))

    def test_assess(self):
        inst = data_path("binary_tree.json")
        self.assertEqual(run(["assess", inst, "--paths", "aa,ab", "--out", self.out("p.json")]), 0)
        result = json.loads(self.read("p.json"))["assessments"][0]
        self.assertEqual(result["removal"], {"kind": "Paths", "ids": ["aa", "ab"]})
        self.assertTrue(result["infeasible"])
        self.assertEqual(run(["assess", inst, "--realizations", "ab,bb", "--out", self.out("r.json")]), 0)
        self.assertEqual([r["node"] for r in json.loads(self.read("r.json"))["assessments"]], ["a", "b"])

    def test_sweep(self):
        inst = self.out("small.json")
        self.assertEqual(run(["gen", "--random", "2,2,2", "--out", inst]), 0)
        csv_path = self.out("sweep.csv")
        self.assertEqual(run(["sweep", inst, "--gamma", "0:1:0.05", "--jobs", "1", "--out", csv_path]), 0)
        lines = self.read("sweep.csv").splitlines()
        self.assertEqual(lines[0], "gamma,objective,n_effective_paths,n_ineffective,n_unidentified")
        self.assertLen(lines, 22)

    def test_uneven_grid_stays_in_range(self):
        self.assertEqual(parse_grid("0:1:0.35"), [0.0, 0.35, 0.7])
        self.assertEqual(parse_grid("0.2:0.5:0.1"), [0.2, 0.3, 0.4, 0.5])
        csv_path = self.out("uneven.csv")
        inst = data_path("binary_tree.json")
        code = run(["sweep", inst, "--gamma", "0:1:0.35", "--jobs", "1", "--out", csv_path])
        self.assertEqual(code, 0)
        self.assertLen(self.read("uneven.csv").splitlines(), 4)

    def test_classify_with_benders_iteration_cap(self):
        inst = data_path("binary_tree.json")
        args = ["classify", inst, "--solver", "benders", "--max-iter", "1", "--jobs", "1"]
        code = run(args + ["--out", self.out("capped.json")])
        self.assertEqual(code, 0)
        report = json.loads(self.read("capped.json"))
        self.assertGreaterEqual(report["objective"], solve_extensive(load_instance(inst)).objective - 1e-9)
        self.assertEqual([n["id"] for n in report["nodes"]], ["a", "b", "aa", "ab", "ba", "bb"])

    def test_exit_codes(self):
        self.assertEqual(run(["classify", data_path("bad_probability.json"), "--jobs", "1"]), 2)
        self.assertEqual(run(["solve", data_path("infeasible.json")]), 3)
        self.assertEqual(run(["assess", data_path("binary_tree.json"), "--paths", "zz"]), 2)
        self.assertEqual(run(["sweep", data_path("newsvendor.json"), "--gamma", "1:0:0.1"]), 2)
        self.assertEqual(run(["gen", "--random", "1,9,2"]), 2)
        self.assertEqual(run(["frobnicate"]), 2)

    def test_water_generation(self):
        inst = self.out("water.json")
        self.assertEqual(run(["gen", "--water", "3", "--gamma", "0.95", "--out", inst]), 0)
        tree = load_instance(inst)
        self.assertLen(tree.nodes, 73)
        self.assertEqual(tree.gamma, [0.95, 0.95])


if __name__ == "__main__":
    absltest.main()
