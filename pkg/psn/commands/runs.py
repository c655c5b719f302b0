import argparse
import logging

from psn.commands.common import run_store

logger = logging.getLogger(__name__)

NAME = "runs"


def register(subparsers) -> None:
    parser = subparsers.add_parser(NAME, help="list runs recorded in the run store")
    parser.add_argument("--db", default="", metavar="URL", help="run store URL (default: PSN_DATABASE_URL)")
    parser.add_argument("--run-id", type=int, default=None, help="show the records of one run")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    with run_store(args.db) as store:
        if args.run_id is None:
            for stored in store.list_runs():
                finished = stored.manifest.finished_at.isoformat() if stored.manifest.finished_at else "-"
                print(f"{stored.id:>5}  {stored.command:<8} seed={stored.manifest.seed:<6} finished={finished}")
            return 0
        history = store.get_history(args.run_id)
        bench = store.get_bench_records(args.run_id)
        if not history and not bench:
            logger.warning(f"Run {args.run_id} has no stored records")
        for record in history:
            print(f"{record.epoch:>4} {record.split:<5} {record.metric:<16} {record.value:.6g}")
        for record in bench:
            ratio = "-" if record.ratio_vs_baseline is None else f"{record.ratio_vs_baseline:.3f}"
            print(f"{record.neuron_kind:<12} N={record.N:<8} T={record.T:<4} {record.mode.value:<9} "
                  f"{record.status:<7} ratio={ratio}")
    return 0
