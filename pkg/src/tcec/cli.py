"""Command-line entry point: ``tcec {schedule,calibrate,run,verify,bounds}``.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 numerical abort.
"""

import argparse
import logging
import os
import sys

from . import __version__, harness
from .config import load_config
from .errors import ConfigError, NumericalAbort, ScheduleError

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_NAN = 0, 1, 2, 3


def _globals(parser, default):
    parser.add_argument("--config", default=default, help="flat section.key = value file")
    parser.add_argument("--out", default=default, help="output directory")
    parser.add_argument("--seed", type=int, default=default, help="base seed override")
    parser.add_argument("--threads", type=int, default=default, help="worker threads")


def build_parser():
    p = argparse.ArgumentParser(prog="tcec", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"tcec {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    _globals(p, None)
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS keeps values given before the subcommand from being reset
    _globals(common, argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("schedule", parents=[common], help="coefficient and m-condition tables")

    c = sub.add_parser("calibrate", parents=[common], help="fit the scaling matrix K")
    c.add_argument("--samples", type=int)
    c.add_argument("--lambda", dest="lam", help="empirical | grid | <value>")
    c.add_argument("--k-out", help="K file path (default OUT/K.txt)")

    r = sub.add_parser("run", parents=[common], help="sample and compare variants")
    r.add_argument("--variant", action="append",
                   help="fp, quant, tcec, tcec-oracle; repeat or comma-separate")
    r.add_argument("--solver", choices=("ddim", "dpmpp2"))
    r.add_argument("--steps", type=int)
    r.add_argument("--seeds", help="S0..S1 inclusive, or a comma list")
    r.add_argument("--k-file")
    r.add_argument("--svg", nargs="?", const="delta_norm.svg",
                   help="also write an SVG chart of median delta-norm curves")

    v = sub.add_parser("verify", parents=[common], help="run the oracle suite")
    v.add_argument("--k-file", help="also check stationarity of this K file")

    sub.add_parser("bounds", parents=[common], help="norm bound report")
    return p


def _variants(values):
    if not values:
        return None
    return [x.strip() for v in values for x in v.split(",") if x.strip()]


def dispatch(args):
    cfg = load_config(args.config)
    out = args.out or cfg["output.dir"]
    threads = max(1, args.threads or 1)
    if args.command == "schedule":
        harness.cmd_schedule(cfg, out, args.seed or 0)
        return EXIT_OK
    if args.command == "calibrate":
        rep = harness.cmd_calibrate(cfg, out, args.seed, threads, args.samples, args.lam, args.k_out)
        print(f"K written to {os.path.join(out, rep['k_file']) if not args.k_out else args.k_out}"
              f" (lambda1={rep['lambda1']:.6g}, {rep['lambda_provenance']})")
        return EXIT_OK
    if args.command == "run":
        seeds = args.seeds
        if seeds is None and args.seed is not None:
            seeds = str(args.seed)
        rep = harness.cmd_run(cfg, out, _variants(args.variant), args.solver, args.steps,
                              seeds, args.k_file, threads, args.svg)
        for name, comp in sorted(rep["comparisons"].items()):
            print(f"{name}: median MSE ratio {comp['median_ratio']:.4g}, "
                  f"improved every seed: {comp['improved_every_seed']}")
        return EXIT_OK
    if args.command == "verify":
        rep = harness.cmd_verify(cfg, out, args.k_file, args.seed or 0)
        for c in rep["checks"]:
            print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}: {c['value']:.3g} (tol {c['tolerance']:.0e})")
        print(f"matching weight mode: {rep['weight_report']['matching_mode']}")
        return EXIT_OK if rep["passed"] else EXIT_VERIFY
    if args.command == "bounds":
        rep = harness.cmd_bounds(cfg, out, args.seed)
        print(f"measured |delta_0| = {rep['measured_delta0']:.6g}, bound = {rep['bound_delta0']:.6g}")
        if rep["premise_warning"]:
            print(f"WARNING: {rep['premise_warning']}")
        return EXIT_OK
    raise AssertionError(args.command)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(args)
    except (ConfigError, ScheduleError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NAN


if __name__ == "__main__":
    sys.exit(main())
