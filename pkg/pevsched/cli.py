"""
Command line front end.
::

    pevsched solve instances/two_pevs.json --out schedule.json
    pevsched simulate --config scenario1 --runs 100 --seed 1 --out runs/s1
    pevsched simulate --config scenario1 --runs 1 --algo orchard --trace --out runs/t
    pevsched sweep --config scenario3 --sweep 1:3:0.2 --runs 50 --out runs/q
    pevsched verify kkt --count 200
    pevsched profile --config scenario2 --runs 20 --out profile.csv

Exit codes are 0 on success, 1 when the input is infeasible or a check
fails and 2 for usage and parse errors.
"""
import os
import sys
import json
import logging
import argparse

import numpy as np

import pevsched
import pevsched.log
from pevsched import report
from pevsched.model import (
    InfeasibleRequestError, InstanceFormatError, evaluate_cost,
    load_instance, reject_infeasible)
from pevsched.offline import OfflineSolver, SolverError, verify_kkt
from pevsched.online import (
    ALGORITHMS, DEFAULT_Q, AlgorithmKind, EngineFault, OnlineEngine)
from pevsched.scenario import (
    ConfigError, aggregate_ratios, generate_instance, load_profile,
    load_scenario, q_sweep, results_frame, run_replications)
from pevsched.check import SUITES, ConditionsNotMetError, run_suite

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2

def _solve(args):
    logger = logging.getLogger('pevsched.cli')
    cost, requests = load_instance(args.instance)
    reject_infeasible(requests)

    solver = OfflineSolver()
    schedule = solver.solve(requests)
    decomp = solver.decomposition
    total = evaluate_cost(schedule, decomp, cost)
    kkt = verify_kkt(schedule, requests, decomp)
    logger.info("{}: {} requests, {} peaks, cost {:.6g} $".format(
        args.instance, len(requests), len(solver.peaks), total))

    if args.out:
        report.write_schedule(args.out, schedule, total, kkt)
    else:
        print(json.dumps(
            report.schedule_document(schedule, total, kkt), indent=2,
            sort_keys=True))
    print(kkt)
    return EXIT_OK if kkt.passed else EXIT_FAILED

def _seeds(args):
    return list(range(args.seed, args.seed + args.runs))

def _write_traces(args, config, algorithms):
    """
    Execution trace of every algorithm on the first seed's instance.

    :returns: Paths written.
    """
    requests = generate_instance(config, args.seed)
    reject_infeasible(requests)
    paths = []
    for algorithm in algorithms:
        kind = AlgorithmKind.parse(algorithm, args.q)
        result = OnlineEngine(requests, config.cost, kind).run()
        path = os.path.join(
            args.out, "trace_{}_seed{}.csv".format(kind.name, args.seed))
        report.write_trace(path, result)
        paths.append(path)
    return paths

def _simulate(args):
    config = load_scenario(args.config)
    algorithms = args.algo or list(ALGORITHMS)
    os.makedirs(args.out, exist_ok=True)

    results = run_replications(
        config, _seeds(args), algorithms, args.q, args.processes)
    summary = aggregate_ratios(results)
    report.write_results(args.out, results_frame(results), summary)
    extra = {}
    if args.trace:
        traces = _write_traces(args, config, algorithms)
        extra["traces"] = [os.path.basename(path) for path in traces]
    report.write_manifest(args.out, report.RunManifest(
        "simulate", args.config, _seeds(args), algorithms, args.q, args.out,
        extra=extra))
    print(summary.to_string(index=False))
    return EXIT_OK

def _q_values(text, parser):
    """
    Parse ``q_min:q_max:step`` or a single ``q``.
    """
    try:
        parts = [float(p) for p in text.split(":")]
    except ValueError:
        parser.error("--sweep expects q_min:q_max:step, got '{}'".format(text))
    if len(parts) == 1:
        parts = [parts[0], parts[0], 1.0]
    if len(parts) != 3:
        parser.error("--sweep expects q_min:q_max:step, got '{}'".format(text))
    q_min, q_max, step = parts
    if step <= 0:
        parser.error("--sweep step must be > 0")
    if not 1 <= q_min <= q_max <= 5:
        parser.error("--sweep needs 1 <= q_min <= q_max <= 5")
    count = int(np.floor((q_max - q_min) / step + 1e-9)) + 1
    return [round(q_min + n * step, 10) for n in range(count)]

def _sweep(args):
    config = load_scenario(args.config)
    os.makedirs(args.out, exist_ok=True)
    sweep = q_sweep(
        config, args.q_values, args.runs, args.seed, args.processes)
    report.write_frame(os.path.join(args.out, "sweep.csv"), sweep.frame)
    report.write_manifest(args.out, report.RunManifest(
        "sweep", args.config, _seeds(args), ["orchard"], None, args.out,
        extra={"q_values": args.q_values}))
    print(sweep.frame.to_string(index=False))
    print("best q {:g}: mean ratio {:.4f}".format(
        sweep.best_q, sweep.best_ratio))
    return EXIT_OK

def _verify(args):
    try:
        check = run_suite(args.suite, args.count, args.seed, args.max_requests)
    except ConditionsNotMetError as e:
        print(e, file=sys.stderr)
        print("replay with: pevsched verify {} --count 1 --seed <seed>, "
            "failing seeds {}".format(args.suite, e.seeds), file=sys.stderr)
        return EXIT_FAILED
    print(check.summary())
    print("{}: {} instances passed".format(args.suite, args.count))
    return EXIT_OK

def _profile(args):
    config = load_scenario(args.config)
    algorithms = args.algo or list(ALGORITHMS)
    frame = load_profile(
        config, _seeds(args), algorithms, args.q, args.resolution,
        args.processes)
    report.write_frame(args.out, frame)
    directory = os.path.dirname(os.path.abspath(args.out))
    report.write_manifest(directory, report.RunManifest(
        "profile", args.config, _seeds(args), algorithms, args.q, args.out,
        extra={"resolution_h": args.resolution}))
    return EXIT_OK

def build_parser():
    parser = argparse.ArgumentParser(
        prog="pevsched",
        description="Offline and online PEV charging schedules.")
    parser.add_argument(
        "--version", action="version",
        version="%(prog)s {}".format(pevsched.__version__))
    parser.add_argument(
        "--log", action="append", default=[], metavar="NAME",
        help="show logs of this logger and its children (repeatable)")
    parser.add_argument(
        "--verbose", action="store_true", help="show debug logs")
    parser.add_argument(
        "--list-loggers", action="store_true",
        help="list logger names and exit")
    commands = parser.add_subparsers(dest="command")

    solve = commands.add_parser("solve", help="solve one instance offline")
    solve.add_argument("instance", help="instance JSON file")
    solve.add_argument("--out", help="schedule JSON to write (default stdout)")
    solve.set_defaults(handler=_solve)

    def experiment(name, help_text):
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument(
            "--config", required=True,
            help="scenario JSON file or scenario1/scenario2/scenario3")
        sub.add_argument("--runs", type=int, default=1000,
            help="replications (default 1000)")
        sub.add_argument("--seed", type=int, default=0,
            help="first seed, replications use seed .. seed + runs - 1")
        sub.add_argument("--processes", type=int, default=1,
            help="worker processes")
        return sub

    simulate = experiment("simulate", "compare algorithms on a scenario")
    simulate.add_argument("--algo", action="append", choices=ALGORITHMS,
        help="algorithm to run (repeatable, default all)")
    simulate.add_argument("--q", type=float, default=DEFAULT_Q,
        help="ORCHARD speed-up factor (default {})".format(DEFAULT_Q))
    simulate.add_argument("--out", required=True, help="output directory")
    simulate.add_argument("--trace", action="store_true",
        help="also write the execution trace of each algorithm on the first "
        "seed as trace_<algo>_seed<seed>.csv")
    simulate.set_defaults(handler=_simulate)

    sweep = experiment("sweep", "mean ORCHARD ratio over a range of q")
    sweep.add_argument("--sweep", required=True, metavar="Q_MIN:Q_MAX:STEP",
        help="q values, eg. 1:5:0.1")
    sweep.add_argument("--out", required=True, help="output directory")
    sweep.set_defaults(handler=_sweep)

    verify = commands.add_parser("verify", help="run a property suite")
    verify.add_argument("suite", choices=SUITES)
    verify.add_argument("--count", type=int, default=200)
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--max-requests", type=int, default=None,
        help="largest random instance (default depends on the suite)")
    verify.set_defaults(handler=_verify)

    profile = experiment("profile", "mean daily load curve per algorithm")
    profile.add_argument("--algo", action="append", choices=ALGORITHMS,
        help="algorithm to run (repeatable, default all)")
    profile.add_argument("--q", type=float, default=DEFAULT_Q)
    profile.add_argument("--resolution", type=float, default=0.25,
        help="bin width in hours")
    profile.add_argument("--out", required=True, help="CSV file to write")
    profile.set_defaults(handler=_profile)
    return parser

def main(argv=None):
    """
    Run the command line.

    :returns: Exit code.
    """
    parser = build_parser()
    args = parser.parse_args(argv)

    pevsched.log.configure(args.log, args.verbose)

    if args.list_loggers:
        pevsched.log.list_all('pevsched')
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    if getattr(args, "runs", 1) < 1:
        parser.error("--runs must be at least 1")
    if args.command == "sweep":
        args.q_values = _q_values(args.sweep, parser)

    try:
        return args.handler(args)
    except (InstanceFormatError, ConfigError, OSError) as e:
        print("error: {}".format(e), file=sys.stderr)
        return EXIT_USAGE
    except InfeasibleRequestError as e:
        print("error: {}".format(e), file=sys.stderr)
        return EXIT_FAILED
    except (SolverError, EngineFault) as e:
        print("error: {}".format(e), file=sys.stderr)
        return EXIT_FAILED

def run():
    sys.exit(main())

if __name__ == "__main__":
    run()
