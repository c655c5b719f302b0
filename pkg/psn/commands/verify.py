import argparse
import logging

from psn.commands.common import add_common_arguments, apply_threads, finish_manifest, start_manifest, str_list
from psn.scan import corrupt_combine
from psn.verify import SUITES, VerifyOptions, require, run_suites

logger = logging.getLogger(__name__)

NAME = "verify"


def register(subparsers) -> None:
    parser = subparsers.add_parser(NAME, help="run the equivalence and gradient self-checks")
    parser.add_argument("--suite", type=str_list, default=None,
                        help=f"comma-separated subset of {', '.join(SUITES)} (default: all)")
    parser.add_argument("--seeds", type=int, default=100, help="random seeds per grid cell")
    parser.add_argument("--grad-instances", type=int, default=20)
    parser.add_argument("--corrupt-scan", action="store_true", help="fault injection: perturb every scan combine")
    add_common_arguments(parser)
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    options = VerifyOptions(seeds=args.seeds, grad_instances=args.grad_instances)
    config = {"suites": args.suite or list(SUITES), "options": options.model_dump(), "corrupt_scan": args.corrupt_scan}
    manifest = start_manifest(NAME, config, args.seed, args.threads, args.out_dir)
    apply_threads(args.threads)

    if args.corrupt_scan:
        with corrupt_combine():
            results = run_suites(args.suite, options)
    else:
        results = run_suites(args.suite, options)

    for result in results:
        line = f"{result.name:<12} {'PASS' if result.passed else 'FAIL'}  ({result.cases} cases)"
        if not result.passed:
            line += f"  witness: {result.witness}"
        print(line)
    finish_manifest(manifest, args.out_dir, [])
    require(results)
    return 0
