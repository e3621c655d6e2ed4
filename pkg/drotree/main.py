import math

from absl import app, logging
from absl.flags import argparse_flags

from drotree.effectiveness import C2_RULES, classify
from drotree.errors import (
    InstanceInfeasible,
    InstanceUnbounded,
    InvalidRemoval,
    IterationLimit,
    MissingXiField,
    MixedStages,
    NumericalBreakdown,
    ParamOutOfRange,
    ParseError,
    StageOutOfRange,
    UnknownNode,
    ValidationError,
)
from drotree.grid_parser import parse_genspec, parse_grid, parse_ids, parse_numbers
from drotree.instance_gen import gen_random, gen_water_analog
from drotree.lp import to_lp_text
from drotree.oracle import assess_paths, assess_realizations, verify_report
from drotree.solver import (
    DEFAULT_MAX_ITER,
    DEFAULT_TOL,
    build_extensive,
    solve_benders,
    solve_extensive,
)
from drotree.tree import ScenarioTree, load_instance, tree_to_dict, with_gamma
from drotree.util import default_jobs, dump_json, sweep, sweep_to_csv, tree_to_dot, write_text

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_INSTANCE = 3
EXIT_DISAGREEMENT = 4

USAGE_ERRORS = (
    ParseError,
    ValidationError,
    ParamOutOfRange,
    UnknownNode,
    InvalidRemoval,
    MixedStages,
    StageOutOfRange,
    MissingXiField,
)
INSTANCE_ERRORS = (InstanceInfeasible, InstanceUnbounded)

SOLVERS = ("extensive", "benders")


def _as_tree(instance, gamma=None):
    tree = instance if isinstance(instance, ScenarioTree) else load_instance(instance)
    if gamma is None:
        return tree
    if isinstance(gamma, (list, tuple)) and len(gamma) == 1:
        gamma = gamma[0]
    return with_gamma(tree, gamma)


def solve(instance, solver="extensive", gamma=None, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, v=False):
    """
    Solves the distributionally robust problem on a scenario tree.

    Args:
        instance (str or ScenarioTree): Instance file path or a loaded tree.
        solver (str, optional): "extensive" (one LP) or "benders". Defaults to "extensive".
        gamma (float or list, optional): Radius override, uniform or per stage.
        tol (float, optional): Benders relative gap. Defaults to 1e-6.
        max_iter (int, optional): Benders pass limit. Defaults to 200.
        v (bool, optional): Whether to enable verbose mode. Defaults to False.

    Returns:
        SolveOutcome: Policy, per-node cost-to-go and worst-case distributions.
    """
    tree = _as_tree(instance, gamma)
    if solver == "benders":
        return solve_benders(tree, tol, max_iter, v)
    if solver != "extensive":
        raise ParamOutOfRange(f"unknown solver {solver!r}")
    return solve_extensive(tree, v)


def classify_instance(instance, gamma=None, c2_rule="c2_only", oracle=False, jobs=1, solver="extensive", v=False):
    """
    Labels every realization and scenario path of an instance.

    Args:
        instance (str or ScenarioTree): Instance file path or a loaded tree.
        gamma (float or list, optional): Radius override.
        c2_rule (str, optional): "c2_only" or "c1_plus_c2". Defaults to "c2_only".
        oracle (bool, optional): Check every identified label by re-solving.
        jobs (int, optional): Worker processes for the oracle.
        solver (str, optional): Solver for the baseline. Defaults to "extensive".
        v (bool, optional): Whether to enable verbose mode. Defaults to False.

    Returns:
        tuple: (EffectivenessReport, SolveOutcome). With `oracle`, the
        report's `oracle` attribute holds the verification summary.
    """
    tree = _as_tree(instance, gamma)
    outcome = solve(tree, solver, v=v)
    report = classify(tree, outcome, c2_rule, v)
    if oracle:
        report.oracle = verify_report(tree, report, outcome, jobs, v=v)
    return report, outcome


def assess(instance, paths=None, realizations=None, gamma=None, v=False):
    """
    Assesses a set of scenario paths or of realizations against the optimal value.

    Args:
        instance (str or ScenarioTree): Instance file path or a loaded tree.
        paths (list, optional): Leaf ids to remove.
        realizations (list, optional): Node ids at one stage to remove.
        gamma (float or list, optional): Radius override.
        v (bool, optional): Whether to enable verbose mode. Defaults to False.

    Returns:
        list: AssessmentResult objects; one for paths, one per affected parent
        for realizations.
    """
    if (paths is None) == (realizations is None):
        raise InvalidRemoval("give exactly one of paths or realizations")
    tree = _as_tree(instance, gamma)
    outcome = solve_extensive(tree, v)
    if paths is not None:
        return [assess_paths(tree, paths, outcome, v)]
    return list(assess_realizations(tree, realizations, outcome, v).values())


def gamma_sweep(instance, gammas, solver="extensive", jobs=1, c2_rule="c2_only"):
    """
    Solves and classifies the instance for each uniform radius.

    Returns:
        pandas.DataFrame: gamma, objective and path label counts per radius.
    """
    return sweep(_as_tree(instance), gammas, solver, jobs, c2_rule)


def debug(instance, gamma=None, c2_rule="c2_only"):
    classify_instance(instance, gamma, c2_rule, v=True)


def _emit(text, out):
    if out:
        write_text(out, text)
    else:
        print(text, end="")


def _solve_or_best(tree, solver, args):
    try:
        return solve(tree, solver, tol=args.tol, max_iter=args.max_iter, v=args.verbose)
    except IterationLimit as e:
        logging.warning("%s; writing the best policy found", e)
        return e.outcome


def _cmd_solve(args):
    tree = _as_tree(args.instance, args.gamma)
    if args.lp_dump:
        write_text(args.lp_dump, to_lp_text(build_extensive(tree)[0]))
    if args.solver != "both":
        outcome = _solve_or_best(tree, args.solver, args)
        _emit(dump_json(outcome.to_dict(tree)), args.out)
        return EXIT_OK

    outcomes = {name: _solve_or_best(tree, name, args) for name in SOLVERS}
    a, b = outcomes["extensive"].objective, outcomes["benders"].objective
    rel = abs(a - b) / max(1.0, abs(a))
    payload = {name: o.to_dict(tree) for name, o in outcomes.items()}
    payload["relative_difference"] = rel
    if args.out:
        write_text(args.out, dump_json(payload))
    print(f"extensive {format(a, '.17g')}\nbenders {format(b, '.17g')}\nrelative difference {rel:.3g}")
    return EXIT_OK


def _cmd_classify(args):
    tree = _as_tree(args.instance, args.gamma)
    outcome = _solve_or_best(tree, args.solver, args)
    report = classify(tree, outcome, args.c2_rule, args.verbose)
    if args.oracle:
        report.oracle = verify_report(tree, report, outcome, args.jobs, v=args.verbose)
    _emit(dump_json(report.to_dict()), args.out)
    if args.dot:
        write_text(args.dot, tree_to_dot(tree, report))
    if report.oracle is not None and report.oracle["disagreements"]:
        logging.warning("%d oracle disagreements", len(report.oracle["disagreements"]))
        if args.strict:
            return EXIT_DISAGREEMENT
    return EXIT_OK


def _cmd_assess(args):
    tree = _as_tree(args.instance, args.gamma)
    results = assess(tree, args.paths, args.realizations, v=args.verbose)
    _emit(dump_json({"assessments": [r.to_dict(tree) for r in results]}), args.out)
    return EXIT_OK


def _cmd_sweep(args):
    frame = gamma_sweep(args.instance, args.gamma, args.solver, args.jobs, args.c2_rule)
    _emit(sweep_to_csv(frame), args.out)
    return EXIT_OK


def _cmd_gen(args):
    gamma = args.gamma[0] if len(args.gamma) == 1 else args.gamma
    if args.random is not None:
        seed, T, branching = args.random
        tree = gen_random(seed, T, branching, gamma, args.n_vars, args.dependence)
    else:
        tree = gen_water_analog(args.water, gamma, not args.symmetric, args.dependence)
    _emit(dump_json(tree_to_dict(tree)), args.out)
    return EXIT_OK


def _non_negative_int(text):
    value = int(text)
    if value < 0:
        raise ValueError(text)
    return value


def _positive_float(text):
    value = float(text)
    if not value > 0.0 or math.isinf(value):
        raise ValueError(text)
    return value


def build_parser():
    parser = argparse_flags.ArgumentParser(
        prog="drotree",
        description="Multistage distributionally robust optimization over scenario trees "
        "with total-variation ambiguity, and effectiveness of scenarios.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text, func):
        p = sub.add_parser(name, help=help_text, inherited_absl_flags=None)
        p.set_defaults(func=func)
        p.add_argument("--verbose", action="store_true", help="Log solver and oracle detail.")
        return p

    def instance_args(p):
        p.add_argument("instance", help="Instance JSON file.")
        p.add_argument("--gamma", type=parse_numbers, help="Radius override: one value or one per stage.")
        p.add_argument("--out", help="Output file (default: stdout).")

    p = command("solve", "Solve an instance.", _cmd_solve)
    instance_args(p)
    p.add_argument("--solver", choices=SOLVERS + ("both",), default="extensive")
    p.add_argument("--tol", type=_positive_float, default=DEFAULT_TOL)
    p.add_argument("--max-iter", type=int, default=DEFAULT_MAX_ITER)
    p.add_argument("--lp-dump", help="Write the extensive LP in CPLEX-LP format.")

    p = command("classify", "Label realizations and scenario paths.", _cmd_classify)
    instance_args(p)
    p.add_argument("--oracle", action="store_true", help="Verify identified labels by re-solving.")
    p.add_argument("--strict", action="store_true", help="Exit 4 on any oracle disagreement.")
    p.add_argument("--c2-rule", choices=C2_RULES, default="c2_only")
    p.add_argument("--solver", choices=SOLVERS, default="extensive")
    p.add_argument("--tol", type=_positive_float, default=DEFAULT_TOL)
    p.add_argument("--max-iter", type=int, default=DEFAULT_MAX_ITER)
    p.add_argument("--jobs", type=int, default=default_jobs())
    p.add_argument("--dot", help="Write the labeled tree in Graphviz DOT format.")

    p = command("assess", "Assess removing scenario paths or realizations.", _cmd_assess)
    instance_args(p)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--paths", type=parse_ids, help="Comma-separated leaf ids.")
    group.add_argument("--realizations", type=parse_ids, help="Comma-separated node ids at one stage.")

    p = command("sweep", "Classify over a grid of uniform radii.", _cmd_sweep)
    p.add_argument("instance", help="Instance JSON file.")
    p.add_argument("--gamma", type=parse_grid, required=True, help="Grid start:stop:step, inclusive.")
    p.add_argument("--solver", choices=SOLVERS, default="extensive")
    p.add_argument("--c2-rule", choices=C2_RULES, default="c2_only")
    p.add_argument("--jobs", type=int, default=default_jobs())
    p.add_argument("--out", help="CSV output file (default: stdout).")

    p = command("gen", "Generate an instance.", _cmd_gen)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--random", type=parse_genspec, help="seed,T,branching")
    group.add_argument("--water", type=_non_negative_int, help="Seed of the water allocation analog.")
    p.add_argument("--gamma", type=parse_numbers, default=[0.5])
    p.add_argument("--n-vars", type=int, default=2)
    p.add_argument(
        "--dependence", type=float, default=0.0, help="Weight of the parent realization in each child."
    )
    p.add_argument("--symmetric", action="store_true", help="Water analog: same data at stages 2 and 3.")
    p.add_argument("--out", help="Output file (default: stdout).")
    return parser


def _dispatch(args):
    try:
        return args.func(args)
    except USAGE_ERRORS as e:
        logging.error("%s", e)
        return EXIT_USAGE
    except INSTANCE_ERRORS as e:
        logging.error("%s", e)
        return EXIT_INSTANCE
    except NumericalBreakdown as e:
        logging.error("numerical breakdown: %s", e)
        return EXIT_FAILURE
    except IterationLimit as e:
        logging.error("%s", e)
        return EXIT_FAILURE


def run(argv):
    """Runs the command line on argv (without the program name) and returns the exit code."""
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    return _dispatch(args)


def main():
    app.run(_dispatch, flags_parser=lambda argv: build_parser().parse_args(argv[1:]))


if __name__ == "__main__":
    main()
