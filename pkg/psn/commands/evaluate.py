import argparse
import json
import logging
from pathlib import Path

from psn.checkpoint import load_checkpoint
from psn.commands.common import add_common_arguments, apply_threads, finish_manifest, start_manifest
from psn.commands.train import CHECKPOINT_FILE, configs_from_manifest
from psn.data import load_data
from psn.io import atomic_write_text
from psn.network import Network
from psn.training import evaluate

logger = logging.getLogger(__name__)

NAME = "eval"
RESULT_FILE = "eval.json"


def register(subparsers) -> None:
    parser = subparsers.add_parser(NAME, help="evaluate a trained checkpoint on the test split")
    parser.add_argument("--manifest", required=True, help="train manifest describing the model and data")
    parser.add_argument("--checkpoint", default=None, help=f"default: {CHECKPOINT_FILE} next to the manifest")
    parser.add_argument("--split", choices=["train", "test"], default="test")
    add_common_arguments(parser)
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    model, cfg, data_spec = configs_from_manifest(args.manifest)
    checkpoint = Path(args.checkpoint) if args.checkpoint else Path(args.manifest).parent / CHECKPOINT_FILE
    config = {"train_manifest": str(args.manifest), "checkpoint": str(checkpoint), "split": args.split}
    manifest = start_manifest(NAME, config, cfg.seed, args.threads, args.out_dir)
    apply_threads(args.threads)

    network = Network(model)
    network.load_state(load_checkpoint(checkpoint))
    train_data, test_data = load_data(data_spec)
    accuracy, rates = evaluate(network, test_data if args.split == "test" else train_data)

    print(f"accuracy {accuracy:.4f}")
    for layer, rate in enumerate(rates):
        print(f"firing_rate/{layer} {rate:.4f}")
    result_path = atomic_write_text(args.out_dir / RESULT_FILE,
                                    json.dumps({"accuracy": accuracy, "firing_rates": rates}, indent=2) + "\n")
    finish_manifest(manifest, args.out_dir, [result_path])
    return 0
