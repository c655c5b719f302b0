import argparse
import logging

from psn.checkpoint import save_checkpoint
from psn.commands.common import (add_common_arguments, add_db_argument, apply_threads, finish_manifest,
                                 read_manifest, run_store, start_manifest)
from psn.data import data_geometry, load_data, resolve_data_spec
from psn.models import DataSpec, LossKind, ModelSpec, NeuronKind, NeuronSpec, OptimizerKind, ResetMode, TrainConfig
from psn.training import train, write_history

logger = logging.getLogger(__name__)

NAME = "train"
HISTORY_FILE = "history.jsonl"
CHECKPOINT_FILE = "model.psnckpt"


def register(subparsers) -> None:
    parser = subparsers.add_parser(NAME, help="train a spiking sequence classifier")
    parser.add_argument("--manifest", default=None, help="rerun exactly from a previous train manifest")
    parser.add_argument("--neuron", choices=[k.value for k in NeuronKind], default=NeuronKind.PSN.value)
    parser.add_argument("--order", type=int, default=None, help="order k of masked/sliding PSN (default: T)")
    parser.add_argument("--tau-m", type=float, default=2.0)
    parser.add_argument("--reset-mode", choices=[m.value for m in ResetMode], default=ResetMode.HARD.value)
    parser.add_argument("--detach-reset", action="store_true")
    parser.add_argument("--epochs", type=int, default=50)
    parser.add_argument("--batch-size", type=int, default=64)
    parser.add_argument("--lr", type=float, default=None, help="default 0.1 for SGD, 0.001 for AdamW")
    parser.add_argument("--optimizer", choices=[k.value for k in OptimizerKind], default=OptimizerKind.SGD_MOMENTUM.value)
    parser.add_argument("--momentum", type=float, default=0.9)
    parser.add_argument("--weight-decay", type=float, default=0.0)
    parser.add_argument("--loss", choices=[k.value for k in LossKind], default=LossKind.CE.value)
    parser.add_argument("--label-smoothing", type=float, default=0.0)
    parser.add_argument("--lr-schedule", choices=["cosine", "step", "constant"], default="cosine")
    parser.add_argument("--no-lambda-schedule", action="store_true")
    parser.add_argument("--grad-clip", type=float, default=None)
    parser.add_argument("--hidden", type=int, default=64)
    parser.add_argument("--depth", type=int, default=1)
    parser.add_argument("--head", choices=["mean", "per_step"], default="mean")
    parser.add_argument("--data", default="toy", help="'toy' or 'idx:<dir>'")
    parser.add_argument("--classes", type=int, default=None,
                        help="default: 4 for toy, one past the largest label for idx")
    parser.add_argument("--samples-per-class", type=int, default=500)
    parser.add_argument("--test-samples-per-class", type=int, default=125)
    add_common_arguments(parser)
    add_db_argument(parser)
    parser.set_defaults(handler=run)


def configs_from_args(args: argparse.Namespace):
    data = resolve_data_spec(DataSpec(source=args.data, num_classes=args.classes,
                                      samples_per_class=args.samples_per_class,
                                      test_samples_per_class=args.test_samples_per_class, seed=args.seed))
    time_steps, channels = data_geometry(data)
    neuron = NeuronSpec(kind=NeuronKind(args.neuron), order=args.order, tau_m=args.tau_m,
                        reset_mode=ResetMode(args.reset_mode), detach_reset=args.detach_reset)
    model = ModelSpec.classifier(neuron, time_steps, channels, args.hidden, data.num_classes, depth=args.depth,
                                 seed=args.seed, head=args.head)
    optimizer = OptimizerKind(args.optimizer)
    lr = args.lr if args.lr is not None else (1e-3 if optimizer == OptimizerKind.ADAM_LIKE else 0.1)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=lr, optimizer_kind=optimizer,
                      momentum=args.momentum, weight_decay=args.weight_decay, loss_kind=LossKind(args.loss),
                      label_smoothing=args.label_smoothing, lambda_schedule_enabled=not args.no_lambda_schedule,
                      lr_schedule=args.lr_schedule, grad_clip=args.grad_clip, seed=args.seed)
    return model, cfg, data


def configs_from_manifest(path: str):
    manifest = read_manifest(path)
    config = manifest.config
    return (ModelSpec.model_validate(config["model"]), TrainConfig.model_validate(config["train"]),
            DataSpec.model_validate(config["data"]))


def run(args: argparse.Namespace) -> int:
    model, cfg, data_spec = configs_from_manifest(args.manifest) if args.manifest else configs_from_args(args)
    config = {"model": model.model_dump(mode="json"), "train": cfg.model_dump(mode="json"),
              "data": data_spec.model_dump(mode="json")}
    manifest = start_manifest(NAME, config, cfg.seed, args.threads, args.out_dir)
    apply_threads(args.threads)

    data = load_data(data_spec)
    result = train(model, data, cfg)
    history_path = write_history(args.out_dir / HISTORY_FILE, result.history)
    arrays = {name: tensor.data for name, tensor in result.network.named_parameters().items()}
    checkpoint_path = save_checkpoint(args.out_dir / CHECKPOINT_FILE, arrays)

    finish_manifest(manifest, args.out_dir, [history_path, checkpoint_path])
    with run_store(args.db) as store:
        if store is not None:
            run_id = store.add_run(manifest)
            store.add_history(run_id, result.history)
    logger.info(f"Training finished; history in {history_path}, checkpoint in {checkpoint_path}")
    return 0
