"""Dense tensors with reverse-mode automatic differentiation.

Only the operations the neuron layers and the training loop need are provided.
Every differentiable op goes through :func:`apply_op`, which records a
:class:`TapeEntry` on the active :class:`Tape` when any input requires a gradient.
Tensors are never mutated in place once they take part in a tape.
"""
import itertools
import logging
import threading
import weakref
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from psn.errors import ContractError, DimensionError

logger = logging.getLogger(__name__)

Scalar = Union[int, float]
ArrayLike = Union[np.ndarray, Sequence, Scalar]

_DTYPE: ContextVar = ContextVar("psn_dtype", default=np.dtype(np.float32))
_TAPE: ContextVar = ContextVar("psn_tape", default=None)
_GRAD_ENABLED: ContextVar = ContextVar("psn_grad_enabled", default=True)
_node_ids = itertools.count(1)


class AllocationTracker:
    """Counts bytes of live tensor buffers and the peak since the last reset.

    A buffer is counted once, however many tensors view it, so reshapes,
    single time steps and detached copies are free.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._owners: Dict[int, int] = {}
        self.live_bytes = 0
        self.peak_bytes = 0
        self.allocations = 0

    def attach(self, array: np.ndarray) -> Optional[Tuple[int, int]]:
        root = array
        while isinstance(root.base, np.ndarray):
            root = root.base
        if not root.nbytes:
            return None
        key = id(root)
        with self._lock:
            holders = self._owners.get(key, 0)
            self._owners[key] = holders + 1
            if holders == 0:
                self.live_bytes += root.nbytes
                self.allocations += 1
                if self.live_bytes > self.peak_bytes:
                    self.peak_bytes = self.live_bytes
        return key, root.nbytes

    def release(self, key: int, nbytes: int) -> None:
        with self._lock:
            holders = self._owners.get(key, 0) - 1
            if holders > 0:
                self._owners[key] = holders
                return
            self._owners.pop(key, None)
            self.live_bytes -= nbytes

    def reset_peak(self) -> None:
        with self._lock:
            self.peak_bytes = self.live_bytes
            self.allocations = 0


tracker = AllocationTracker()


@contextmanager
def track_allocations() -> Iterator[AllocationTracker]:
    """Reset the peak counter and hand out the global tracker for the block."""
    tracker.reset_peak()
    yield tracker


def default_dtype() -> np.dtype:
    return _DTYPE.get()


@contextmanager
def precision(dtype: Union[str, np.dtype]) -> Iterator[np.dtype]:
    """Create new tensors in ``dtype`` inside the block (float64 is the gradient-check shadow mode)."""
    resolved = np.dtype(dtype)
    if resolved not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported precision {resolved}")
    token = _DTYPE.set(resolved)
    try:
        yield resolved
    finally:
        _DTYPE.reset(token)


@contextmanager
def no_grad() -> Iterator[None]:
    """Inference mode: ops neither require gradients nor record tape entries."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


# Kernel-internal threading. Work is partitioned over output columns (the batch axis).
_thread_lock = threading.Lock()
_num_threads = 1
_pool: Optional[ThreadPoolExecutor] = None
_MIN_COLUMNS_PER_THREAD = 4096


def set_num_threads(count: int) -> None:
    global _num_threads, _pool
    if count < 1:
        raise ContractError(f"thread count must be >= 1, got {count}")
    with _thread_lock:
        if _pool is not None:
            _pool.shutdown(wait=True)
            _pool = None
        _num_threads = count
        if count > 1:
            _pool = ThreadPoolExecutor(max_workers=count, thread_name_prefix="psn-kernel")
    logger.debug(f"Kernel threads set to {count}")


def get_num_threads() -> int:
    return _num_threads


def _matmul_kernel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    columns = b.shape[1]
    pool = _pool
    if pool is None or columns < _num_threads * _MIN_COLUMNS_PER_THREAD:
        return a @ b
    out = np.empty((a.shape[0], columns), dtype=np.result_type(a, b))
    bounds = np.linspace(0, columns, _num_threads + 1).astype(int)

    def work(span: Tuple[int, int]) -> None:
        lo, hi = span
        out[:, lo:hi] = a @ b[:, lo:hi]

    list(pool.map(work, zip(bounds[:-1], bounds[1:])))
    return out


class Tensor:
    """A dense row-major array with an optional gradient.

    Sequence tensors keep time as the outermost axis: ``(T, N, ...)``.
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype: Optional[np.dtype] = None):
        target = np.dtype(dtype) if dtype is not None else default_dtype()
        array = np.asarray(data)
        if array.dtype != target:
            array = array.astype(target)
        self.data: np.ndarray = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self.is_leaf = True
        ticket = tracker.attach(array)
        if ticket is not None:
            weakref.finalize(self, tracker.release, *ticket)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other: Union["Tensor", Scalar]) -> "Tensor":
        return add(self, other)

    def __sub__(self, other: Union["Tensor", Scalar]) -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: Union["Tensor", Scalar]) -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def parameter(data: ArrayLike) -> Tensor:
    """A learnable leaf tensor."""
    return Tensor(np.array(data), requires_grad=True)


def zeros(shape: Tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape, dtype=default_dtype()))


def as_tensor(value: Union[Tensor, ArrayLike], like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


class SliceGrad:
    """Gradient that is non-zero only at ``index`` of its input; avoids dense zero buffers."""

    __slots__ = ("index", "value")

    def __init__(self, index: int, value: np.ndarray):
        self.index = index
        self.value = value


GradOut = Optional[Union[np.ndarray, SliceGrad]]
BackwardRule = Callable[[np.ndarray], Sequence[GradOut]]


@dataclass
class TapeEntry:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardRule


class Tape:
    """Ordered record of differentiable operations.

    Entries are appended in execution order, so inputs always precede the ops
    that consume them; :meth:`backward` walks them in exact reverse order.
    A tape belongs to one thread at a time.
    """

    def __init__(self) -> None:
        self.entries: List[TapeEntry] = []
        self._tokens: List = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_TAPE.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _TAPE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)

    def count(self, op: str) -> int:
        return sum(1 for entry in self.entries if entry.op == op)

    def first_non_finite(self) -> Optional[str]:
        """Name the earliest recorded tensor holding a NaN or infinity."""
        for entry in self.entries:
            for position, tensor in enumerate(entry.inputs):
                if tensor.is_leaf and not np.all(np.isfinite(tensor.data)):
                    return f"input {position} of {entry.op} (node {tensor.node_id}, shape {tensor.shape})"
            if not np.all(np.isfinite(entry.output.data)):
                return f"output of {entry.op} (node {entry.output.node_id}, shape {entry.output.shape})"
        return None

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``grad`` of every leaf that requires a gradient."""
        if loss.ndim != 0:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad or not any(e.output is loss for e in self.entries):
            raise ContractError("loss was not produced on this tape")

        pending: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        owned: set = set()
        leaves: Dict[int, Tuple[Tensor, np.ndarray]] = {}

        for entry in reversed(self.entries):
            upstream = pending.pop(entry.output.node_id, None)
            if upstream is None:
                continue
            for tensor, grad in zip(entry.inputs, entry.backward(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor.is_leaf:
                    dense = _densify(tensor, grad)
                    if tensor.node_id in leaves:
                        leaves[tensor.node_id] = (tensor, leaves[tensor.node_id][1] + dense)
                    else:
                        leaves[tensor.node_id] = (tensor, dense)
                else:
                    _accumulate(pending, owned, tensor, grad)

        for tensor, grad in leaves.values():
            grad = np.asarray(grad, dtype=tensor.dtype).reshape(tensor.shape)
            tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad


def _densify(tensor: Tensor, grad: Union[np.ndarray, SliceGrad]) -> np.ndarray:
    if isinstance(grad, SliceGrad):
        dense = np.zeros(tensor.shape, dtype=tensor.dtype)
        dense[grad.index] = grad.value
        return dense
    return grad


def _accumulate(pending: Dict[int, np.ndarray], owned: set, tensor: Tensor, grad: Union[np.ndarray, SliceGrad]) -> None:
    key = tensor.node_id
    if isinstance(grad, SliceGrad):
        buffer = pending.get(key)
        if buffer is None:
            buffer = np.zeros(tensor.shape, dtype=tensor.dtype)
            owned.add(key)
        elif key not in owned:
            buffer = buffer.copy()
            owned.add(key)
        buffer[grad.index] += grad.value
        pending[key] = buffer
    elif key in pending:
        pending[key] = pending[key] + grad
        owned.add(key)
    else:
        pending[key] = grad


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for tensor in tensors:
        tensor.grad = None


def apply_op(name: str, data: np.ndarray, inputs: Sequence[Tensor], rule: BackwardRule) -> Tensor:
    """Wrap a forward result and record its backward rule when a gradient is needed."""
    dtype = np.result_type(*[t.dtype for t in inputs]) if inputs else default_dtype()
    needs_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad, dtype=dtype)
    if needs_grad:
        out.is_leaf = False
        tape = _TAPE.get()
        if tape is None:
            logger.debug(f"{name}: gradient required but no tape is active")
        else:
            tape.record(TapeEntry(name, tuple(inputs), out, rule))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def rule(g: np.ndarray) -> Tuple[GradOut, GradOut]:
        grad_a = _matmul_kernel(g, b.data.T) if a.requires_grad else None
        grad_b = _matmul_kernel(a.data.T, g) if b.requires_grad else None
        return grad_a, grad_b

    return apply_op("matmul", _matmul_kernel(a.data, b.data), (a, b), rule)


def broadcast_view(a_shape: Tuple[int, ...], b: np.ndarray) -> Tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
    """Expand ``b`` against ``a_shape``: same shape, scalar, or one value per leading (time) index."""
    if b.shape == a_shape:
        return b, lambda g: g
    if b.ndim == 0 or (b.ndim == 1 and b.size == 1):
        scalar = b.reshape(())
        return scalar, lambda g: np.asarray(g.sum()).reshape(b.shape)
    if b.ndim == 1 and len(a_shape) >= 2 and b.shape[0] == a_shape[0]:
        expanded = b.reshape((b.shape[0],) + (1,) * (len(a_shape) - 1))
        return expanded, lambda g: g.reshape(b.shape[0], -1).sum(axis=1)
    raise DimensionError(f"cannot broadcast shape {b.shape} against {a_shape}")


def elementwise(a: Tensor, b: Union[Tensor, Scalar], kind: str) -> Tensor:
    """Pointwise add/sub/mul; ``b`` may also be a scalar or carry one value per time step."""
    b = as_tensor(b, like=a)
    b_view, reduce_b = broadcast_view(a.shape, b.data)

    if kind == "add":
        out = a.data + b_view

        def rule(g):
            return g, reduce_b(g) if b.requires_grad else None
    elif kind == "sub":
        out = a.data - b_view

        def rule(g):
            return g, reduce_b(-g) if b.requires_grad else None
    elif kind == "mul":
        out = a.data * b_view

        def rule(g):
            grad_a = g * b_view if a.requires_grad else None
            grad_b = reduce_b(g * a.data) if b.requires_grad else None
            return grad_a, grad_b
    else:
        raise ContractError(f"unknown elementwise kind '{kind}'")
    return apply_op(kind, out, (a, b), rule)


def add(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    return elementwise(a, b, "add")


def sub(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    return elementwise(a, b, "sub")


def mul(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    return elementwise(a, b, "mul")


def scalar_affine(a: Tensor, mul: float, add: float) -> Tensor:
    out = a.data * mul + add if add else a.data * mul
    return apply_op("scalar_affine", out, (a,), lambda g: (g * mul,))


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return apply_op("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def index_time(a: Tensor, t: int) -> Tensor:
    """One time step of a sequence tensor, as a view."""
    return apply_op("index_time", a.data[t], (a,), lambda g: (SliceGrad(t, g),))


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading (time) axis."""
    if not tensors:
        raise ContractError("stack needs at least one tensor")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack needs equal shapes, got {sorted(shapes)}")
    out = np.stack([t.data for t in tensors])
    return apply_op("stack", out, tuple(tensors), lambda g: tuple(g[i] for i in range(len(tensors))))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-feature bias along the last axis."""
    if bias.ndim != 1 or bias.shape[0] != x.shape[-1]:
        raise DimensionError(f"bias shape {bias.shape} does not match features of {x.shape}")

    def rule(g):
        return g, g.reshape(-1, bias.shape[0]).sum(axis=0) if bias.requires_grad else None

    return apply_op("add_bias", x.data + bias.data, (x, bias), rule)


def reduce_sum(a: Tensor) -> Tensor:
    return apply_op("sum", np.asarray(a.data.sum(dtype=a.dtype)), (a,),
                    lambda g: (np.broadcast_to(g, a.shape),))


def reduce_mean(a: Tensor) -> Tensor:
    count = a.size

    def rule(g):
        return (np.broadcast_to(g / count, a.shape),)

    return apply_op("mean", np.asarray(a.data.mean(dtype=a.dtype)), (a,), rule)


def mean_time(a: Tensor) -> Tensor:
    """Average over the leading time axis."""
    steps = a.shape[0]

    def rule(g):
        return (np.broadcast_to(g / steps, a.shape),)

    return apply_op("mean_time", a.data.mean(axis=0, dtype=a.dtype), (a,), rule)


def detach(a: Tensor) -> Tensor:
    """Same values, cut from the gradient path."""
    return Tensor(a.data.view(), requires_grad=False, dtype=a.dtype)


def cross_entropy(logits: Tensor, labels: np.ndarray, smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy of ``(N, C)`` logits with optional label smoothing."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects (N, C) logits, got {logits.shape}")
    count, classes = logits.shape
    labels = np.asarray(labels)
    if classes < 2:
        raise ContractError(f"cross_entropy needs at least 2 classes, got {classes}")
    if labels.shape != (count,):
        raise DimensionError(f"labels shape {labels.shape} does not match {count} samples")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ContractError(f"labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]")
    if not 0.0 <= smoothing < 1.0:
        raise ContractError(f"label smoothing must be in [0, 1), got {smoothing}")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    target = np.full(logits.shape, smoothing / classes, dtype=logits.dtype)
    target[np.arange(count), labels] += 1.0 - smoothing
    loss = -(target * log_probs).sum() / count

    def rule(g):
        return ((np.exp(log_probs) - target) * (g / count),)

    return apply_op("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), rule)
