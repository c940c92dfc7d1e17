"""Command line driver.

Exit codes: 0 success, 1 usage or input error, 2 no satisfying lasso in the
abstraction, 3 search budget exhausted, 4 plan check failed.  Errors are
reported on stderr as one line starting with ``error:``.  Set
``BELIEFPRTL_LOG`` (DEBUG, INFO, WARNING, ...) for progress logging.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .fsearch import Plan
from .logic import FormulaSyntaxError, format_formula, parse_formula
from .scenario import ScenarioError, load_scenario
from .synth import check_plan, id_prtl, monte_carlo

EXIT_ERROR = 1
EXIT_CHECK_FAILED = 4
LOG_ENV = "BELIEFPRTL_LOG"


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors, which would collide with the
    # "infeasible abstraction" status
    def error(self, message):
        raise CliError(message)


def _dump(obj, path: str | None):
    text = json.dumps(obj, indent=2) + "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _read_plan(path: str) -> tuple[Plan, dict]:
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"plan: no such file {path!r}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"plan: invalid JSON ({exc})") from None
    body = d.get("plan", d)
    if body is None:
        raise CliError(f"plan: {path!r} records no plan (status {d.get('status')!r})")
    try:
        return Plan.from_json(body), d
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"plan: malformed plan file ({exc})") from None


def cmd_plan(args) -> int:
    sc = load_scenario(args.scenario)
    res = id_prtl(sc, seed=args.seed, k_max=args.k_max, iterations=args.iters)
    doc = {
        "format_version": 1,
        "scenario": sc.name,
        "statistics": res.statistics(with_time=False),
        "plan": res.plan.to_json() if res.plan is not None else None,
    }
    _dump(doc, args.out)
    if res.plan is not None:
        Path(args.out).with_suffix(".csv").write_text(res.plan.to_csv())
        print(f"plan: H={res.plan.H} lasso K={res.lasso.K} L={res.lasso.loop_index} "
              f"after {res.lassos_proposed} lasso(s); wrote {args.out}", file=sys.stderr)
    else:
        print(f"{res.status}: {res.reason}", file=sys.stderr)
    return res.exit_code


def cmd_check(args) -> int:
    plan, _ = _read_plan(args.plan)
    sc = load_scenario(args.scenario)
    rep = check_plan(plan, plan.lasso, sc)
    if rep.ok:
        print("ok")
        return 0
    v = rep.first
    print(f"violation: step {v.step}: {v.kind}: {v.message}")
    return EXIT_CHECK_FAILED


def cmd_montecarlo(args) -> int:
    plan, _ = _read_plan(args.plan)
    sc = load_scenario(args.scenario)
    if args.rollouts < 1:
        raise CliError("rollouts: must be at least 1")
    rep = monte_carlo(plan, sc, args.rollouts, seed=args.seed)
    _dump(rep.to_json(), args.out)
    return 0


def cmd_abstract(args) -> int:
    sc = load_scenario(args.scenario)
    k = sc.kripke()
    edges = sum(len(s) for s in k.succ)
    print(f"{len(k)} cells ({k.pruned} pruned), {edges} transitions, initial cell {k.initial}")
    if args.dump_kripke:
        _dump(k.to_json(), args.dump_kripke)
    return 0


def cmd_parse(args) -> int:
    try:
        f = parse_formula(args.formula)
    except FormulaSyntaxError as exc:
        raise CliError(f"formula: {exc}") from None
    except ValueError as exc:
        raise CliError(f"formula: {exc}") from None
    print(format_formula(f))
    print(repr(f))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="beliefprtl", description="Belief-space planning from chance-constrained temporal logic.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    q = sub.add_parser("plan", help="synthesise a plan")
    q.add_argument("scenario", help="scenario file or bundled scenario name")
    q.add_argument("--seed", type=int, default=None)
    q.add_argument("--k-max", type=int, default=None)
    q.add_argument("--iters", type=int, default=None, help="search iterations per lasso position")
    q.add_argument("--out", default="plan.json")
    q.set_defaults(func=cmd_plan)

    q = sub.add_parser("check", help="verify a plan against its scenario")
    q.add_argument("plan")
    q.add_argument("scenario")
    q.set_defaults(func=cmd_check)

    q = sub.add_parser("montecarlo", help="open-loop Monte Carlo rollouts of a plan")
    q.add_argument("plan")
    q.add_argument("scenario")
    q.add_argument("--rollouts", type=int, required=True)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", default=None, help="report path (default stdout)")
    q.set_defaults(func=cmd_montecarlo)

    q = sub.add_parser("abstract", help="build the Kripke abstraction")
    q.add_argument("scenario")
    q.add_argument("--dump-kripke", default=None, metavar="PATH")
    q.set_defaults(func=cmd_abstract)

    q = sub.add_parser("parse", help="pretty-print a formula")
    q.add_argument("formula")
    q.set_defaults(func=cmd_parse)
    return p


def main(argv=None) -> int:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (CliError, ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"error: {exc.strerror or exc}: {exc.filename}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
