"""Backpropagation-through-time training of the sequence classifiers."""
import logging
import math
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from psn.data import SequenceBatch
from psn.errors import DivergenceError
from psn.io import PathLike, atomic_write_text
from psn.models import HistoryRecord, LossKind, ModelSpec, OptimizerKind, TrainConfig
from psn.network import Network
from psn.neurons import lambda_schedule
from psn.tensor import (Tape, Tensor, cross_entropy, index_time, mean_time, no_grad, reduce_mean, stack,
                        zero_grad)

logger = logging.getLogger(__name__)

LossFn = Callable[[Tensor, np.ndarray, float], Tensor]


# ---------------------------------------------------------------------------
# losses

def loss_ce_mean(outputs: Tensor, labels: np.ndarray, smoothing: float = 0.0) -> Tensor:
    """Cross-entropy of the time-averaged logits ``(T, N, C) -> (N, C)``."""
    return cross_entropy(mean_time(outputs), labels, smoothing)


def loss_tet(outputs: Tensor, labels: np.ndarray, smoothing: float = 0.0) -> Tensor:
    """Cross-entropy at every time step, averaged over time."""
    per_step = [cross_entropy(index_time(outputs, t), labels, smoothing) for t in range(outputs.shape[0])]
    return reduce_mean(stack(per_step))


LOSSES: Dict[LossKind, LossFn] = {LossKind.CE: loss_ce_mean, LossKind.TET: loss_tet}


# ---------------------------------------------------------------------------
# optimizers

class SGDMomentum:
    """SGD with heavy-ball momentum and L2 weight decay folded into the gradient."""

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        if lr == 0:
            return
        for param, velocity in zip(self.params, self.velocity):
            if param.grad is None:
                continue
            grad = param.grad + self.weight_decay * param.data if self.weight_decay else param.grad
            velocity *= self.momentum
            velocity += grad
            param.data -= (lr * velocity).astype(param.dtype, copy=False)


class AdamW:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, params: Sequence[Tensor], betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.first = [np.zeros_like(p.data) for p in self.params]
        self.second = [np.zeros_like(p.data) for p in self.params]
        self.steps = 0

    def step(self, lr: float) -> None:
        if lr == 0:
            return
        self.steps += 1
        correction1 = 1.0 - self.beta1 ** self.steps
        correction2 = 1.0 - self.beta2 ** self.steps
        for param, first, second in zip(self.params, self.first, self.second):
            if param.grad is None:
                continue
            if self.weight_decay:
                param.data *= 1.0 - lr * self.weight_decay
            first *= self.beta1
            first += (1.0 - self.beta1) * param.grad
            second *= self.beta2
            second += (1.0 - self.beta2) * param.grad ** 2
            update = (first / correction1) / (np.sqrt(second / correction2) + self.eps)
            param.data -= (lr * update).astype(param.dtype, copy=False)


def build_optimizer(cfg: TrainConfig, params: Sequence[Tensor]):
    if cfg.optimizer_kind == OptimizerKind.ADAM_LIKE:
        return AdamW(params, weight_decay=cfg.weight_decay)
    return SGDMomentum(params, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def learning_rate_at(epoch: int, cfg: TrainConfig) -> float:
    base = cfg.learning_rate
    if cfg.lr_schedule == "cosine":
        return 0.5 * base * (1.0 + math.cos(math.pi * epoch / cfg.epochs))
    if cfg.lr_schedule == "step":
        return base * cfg.gamma ** (epoch // cfg.step_size)
    return base


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``; returns the norm before clipping."""
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale
    return total


def lambda_for_epoch(epoch: int, epochs: int) -> float:
    return lambda_schedule(epoch, epochs) if epochs >= 2 else 1.0


# ---------------------------------------------------------------------------
# loops

class EpochStats(BaseModel):
    loss: float
    accuracy: float
    firing_rates: List[float]


class TrainResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    network: Network
    history: List[HistoryRecord]


def _batches(count: int, batch_size: int, rng: Optional[np.random.Generator]) -> Iterable[np.ndarray]:
    order = rng.permutation(count) if rng is not None else np.arange(count)
    for start in range(0, count, batch_size):
        yield order[start:start + batch_size]


def _divergence(tape: Tape, what: str) -> DivergenceError:
    culprit = tape.first_non_finite() or what
    logger.error(f"Training diverged: first non-finite tensor is {culprit}")
    return DivergenceError(f"non-finite {what}; first non-finite tensor: {culprit}", tensor_name=culprit)


def _run_epoch(network: Network, data: SequenceBatch, cfg: TrainConfig, optimizer, lr: float,
               rng: np.random.Generator, loss_fn: LossFn) -> EpochStats:
    params = network.parameters()
    total_loss = 0.0
    correct = 0
    rates = None
    for index in _batches(data.num_samples, cfg.batch_size, rng):
        batch = data.subset(index)
        with Tape() as tape:
            logits, batch_rates = network.forward(batch.inputs)
            loss = loss_fn(logits, batch.labels, cfg.label_smoothing)
        if not np.isfinite(loss.data):
            raise _divergence(tape, "loss")
        tape.backward(loss)
        if any(p.grad is not None and not np.all(np.isfinite(p.grad)) for p in params):
            raise _divergence(tape, "gradient")
        if cfg.grad_clip is not None:
            clip_grad_norm(params, cfg.grad_clip)
        optimizer.step(lr)
        zero_grad(params)

        size = index.size
        total_loss += float(loss.data) * size
        correct += int(np.sum(network.predict(logits) == batch.labels))
        weighted = np.asarray(batch_rates) * size
        rates = weighted if rates is None else rates + weighted
    count = data.num_samples
    return EpochStats(loss=total_loss / count, accuracy=correct / count,
                      firing_rates=[] if rates is None else (rates / count).tolist())


def evaluate_stats(network: Network, data: SequenceBatch, batch_size: int = 256,
                   loss_fn: LossFn = loss_ce_mean, smoothing: float = 0.0) -> EpochStats:
    total_loss = 0.0
    correct = 0
    rates = None
    with no_grad():
        for index in _batches(data.num_samples, batch_size, None):
            batch = data.subset(index)
            logits, batch_rates = network.forward(batch.inputs)
            size = index.size
            total_loss += float(loss_fn(logits, batch.labels, smoothing).data) * size
            correct += int(np.sum(network.predict(logits) == batch.labels))
            weighted = np.asarray(batch_rates) * size
            rates = weighted if rates is None else rates + weighted
    count = data.num_samples
    return EpochStats(loss=total_loss / count, accuracy=correct / count,
                      firing_rates=[] if rates is None else (rates / count).tolist())


def evaluate(network: Network, data: SequenceBatch, batch_size: int = 256) -> Tuple[float, List[float]]:
    """Top-1 accuracy and the mean firing rate of every neuron layer."""
    stats = evaluate_stats(network, data, batch_size)
    return stats.accuracy, stats.firing_rates


def _records(epoch: int, split: str, stats: EpochStats) -> List[HistoryRecord]:
    records = [
        HistoryRecord(epoch=epoch, split=split, metric="loss", value=stats.loss),
        HistoryRecord(epoch=epoch, split=split, metric="accuracy", value=stats.accuracy),
    ]
    records.extend(HistoryRecord(epoch=epoch, split=split, metric=f"firing_rate/{layer}", value=rate)
                   for layer, rate in enumerate(stats.firing_rates))
    return records


def train(model: ModelSpec, data: Tuple[SequenceBatch, SequenceBatch], cfg: TrainConfig,
          on_epoch: Optional[Callable[[int, List[HistoryRecord]], None]] = None) -> TrainResult:
    """Train a fresh network built from ``model``; the history holds one block of records per epoch.

    Raises:
        DivergenceError: the loss or a gradient became non-finite.
    """
    train_data, test_data = data
    network = Network(model)
    optimizer = build_optimizer(cfg, network.parameters())
    loss_fn = LOSSES[cfg.loss_kind]
    rng = np.random.default_rng(cfg.seed)
    history: List[HistoryRecord] = []
    masked = bool(network.masked_layers)

    for epoch in range(cfg.epochs):
        lr = learning_rate_at(epoch, cfg)
        if masked and cfg.lambda_schedule_enabled:
            network.set_lambda(lambda_for_epoch(epoch, cfg.epochs))
        train_stats = _run_epoch(network, train_data, cfg, optimizer, lr, rng, loss_fn)
        test_stats = evaluate_stats(network, test_data, max(cfg.batch_size, 256), loss_fn, cfg.label_smoothing)

        block = _records(epoch, "train", train_stats) + _records(epoch, "test", test_stats)
        block.append(HistoryRecord(epoch=epoch, split="train", metric="lr", value=lr))
        if masked:
            block.append(HistoryRecord(epoch=epoch, split="train", metric="lambda", value=network.current_lambda()))
        history.extend(block)
        logger.info(f"Epoch {epoch + 1}/{cfg.epochs}: loss {train_stats.loss:.4f} "
                    f"train acc {train_stats.accuracy:.3f} test acc {test_stats.accuracy:.3f}")
        if on_epoch is not None:
            on_epoch(epoch, block)
    return TrainResult(network=network, history=history)


# ---------------------------------------------------------------------------
# history files

def format_history(records: Iterable[HistoryRecord]) -> str:
    return "".join(record.model_dump_json() + "\n" for record in records)


def write_history(path: PathLike, records: Iterable[HistoryRecord]) -> Path:
    """One JSON object per line: ``{"epoch", "split", "metric", "value"}``."""
    return atomic_write_text(path, format_history(records))


def read_history(path: PathLike) -> List[HistoryRecord]:
    lines = Path(path).read_text().splitlines()
    return [HistoryRecord.model_validate_json(line) for line in lines if line.strip()]


def metric_series(records: Iterable[HistoryRecord], metric: str, split: str = "train") -> List[float]:
    return [r.value for r in records if r.metric == metric and r.split == split]
