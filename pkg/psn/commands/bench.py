import argparse
import logging

from psn.bench import bench_forward, bench_training, format_grid, write_csv
from psn.commands.common import (add_common_arguments, add_db_argument, apply_threads, finish_manifest, int_list,
                                 run_store, start_manifest, str_list)
from psn.models import BenchConfig, BenchMode

logger = logging.getLogger(__name__)

NAME = "bench"


def register(subparsers) -> None:
    parser = subparsers.add_parser(NAME, help="time neuron kinds over an (N, T) grid")
    parser.add_argument("--mode", choices=[m.value for m in BenchMode], default=BenchMode.INFERENCE.value)
    parser.add_argument("--kinds", type=str_list, default=["lif", "psn"], help="comma-separated neuron kinds")
    parser.add_argument("--n-values", type=int_list, default=[2 ** 8, 2 ** 12, 2 ** 16, 2 ** 20])
    parser.add_argument("--t-values", type=int_list, default=[2, 4, 8, 16, 32, 64])
    parser.add_argument("--warmup", type=int, default=1)
    parser.add_argument("--iters", type=int, default=3, help="measured iterations (median is reported)")
    parser.add_argument("--skip-large", action="store_true", help="skip cells with N >= --large-n")
    parser.add_argument("--large-n", type=int, default=2 ** 20)
    parser.add_argument("--out", default=None, help="CSV path (default: <out-dir>/bench.csv)")
    add_common_arguments(parser)
    add_db_argument(parser)
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    cfg = BenchConfig(neuron_kinds=args.kinds, n_values=args.n_values, t_values=args.t_values,
                      mode=BenchMode(args.mode), warmup_iters=args.warmup, measured_iters=args.iters,
                      seed=args.seed, threads=args.threads, skip_large=args.skip_large, large_n=args.large_n)
    out = args.out or args.out_dir / "bench.csv"
    manifest = start_manifest(NAME, cfg.model_dump(mode="json"), cfg.seed, cfg.threads, args.out_dir)
    apply_threads(cfg.threads)

    runner = bench_training if cfg.mode == BenchMode.TRAINING else bench_forward
    records = runner(cfg)
    csv_path = write_csv(out, records)
    print(format_grid(records), end="")

    finish_manifest(manifest, args.out_dir, [csv_path])
    with run_store(args.db) as store:
        if store is not None:
            run_id = store.add_run(manifest)
            store.add_bench_records(run_id, records)
    skipped = sum(1 for r in records if r.status == "skipped")
    logger.info(f"Wrote {len(records)} benchmark records ({skipped} skipped) to {csv_path}")
    return 0
