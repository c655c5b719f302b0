import argparse
import logging
from typing import List, Tuple

from psn.bench import bench_memory, format_memory_table
from psn.commands.common import add_common_arguments, apply_threads, finish_manifest, start_manifest
from psn.io import atomic_write_text

logger = logging.getLogger(__name__)

NAME = "memory"
REPORT_FILE = "memory.jsonl"


def rows(text: str) -> List[Tuple[int, int]]:
    """Parse ``"16:16,16:32"`` into (T, N) pairs."""
    try:
        return [(int(t), int(n)) for t, n in (part.split(":") for part in text.split(",") if part.strip())]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated T:N pairs, got {text!r}")


def register(subparsers) -> None:
    parser = subparsers.add_parser(NAME, help="compare tracked training memory of no-neuron, IF and PSN stacks")
    parser.add_argument("--rows", type=rows, default=[(8, 16), (16, 16), (16, 32)], help="T:N pairs")
    parser.add_argument("--batch", type=int, default=16)
    parser.add_argument("--depth", type=int, default=3, help="synapse layers per stack")
    add_common_arguments(parser)
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    config = {"rows": args.rows, "batch": args.batch, "depth": args.depth}
    manifest = start_manifest(NAME, config, args.seed, args.threads, args.out_dir)
    apply_threads(args.threads)

    reports = [bench_memory(T, N, batch=args.batch, depth=args.depth) for T, N in args.rows]
    print(format_memory_table(reports), end="")
    report_path = atomic_write_text(args.out_dir / REPORT_FILE,
                                    "".join(report.model_dump_json() + "\n" for report in reports))
    finish_manifest(manifest, args.out_dir, [report_path])
    return 0
