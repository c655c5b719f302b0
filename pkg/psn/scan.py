"""Work-efficient parallel scans for the reset-free charge recurrences.

Elements are pairs ``(a, c)`` standing for the affine map ``h -> a*h + c``;
composing "first then second" is ``(a1, c1) o (a2, c2) = (a1*a2, a2*c1 + c2)``.
The prefix sum is the special case ``a = 1`` and is carried without the ``a`` part.
The time axis is padded to a power of two with the identity ``(1, 0)`` and
swept up then down (Blelloch), independently for every column.
"""
import logging
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import numpy as np

from psn.models import LinearRecurrence
from psn.tensor import Tensor, apply_op

logger = logging.getLogger(__name__)

Pair = Tuple[Optional[np.ndarray], np.ndarray]


@dataclass
class ScanStats:
    """Combine invocations of the instrumented scans."""

    combines: int = 0  # element-level combines (work)
    sweeps: int = 0  # vectorised combine rounds (depth)


_STATS: ContextVar = ContextVar("psn_scan_stats", default=None)
_FAULT: ContextVar = ContextVar("psn_scan_fault", default=0.0)


@contextmanager
def instrument() -> Iterator[ScanStats]:
    stats = ScanStats()
    token = _STATS.set(stats)
    try:
        yield stats
    finally:
        _STATS.reset(token)


@contextmanager
def corrupt_combine(offset: float = 1e-2) -> Iterator[None]:
    """Test hook: every combine adds ``offset`` to its constant part."""
    logger.warning(f"Scan combine corrupted by {offset} for this block")
    token = _FAULT.set(offset)
    try:
        yield
    finally:
        _FAULT.reset(token)


def combine(first: Pair, second: Pair) -> Pair:
    a1, c1 = first
    a2, c2 = second
    if a1 is None:
        result: Pair = (None, c1 + c2)
    else:
        result = (a1 * a2, a2 * c1 + c2)
    stats = _STATS.get()
    if stats is not None:
        stats.combines += c2.shape[0] if c2.ndim else 1
        stats.sweeps += 1
    offset = _FAULT.get()
    if offset:
        result = (result[0], result[1] + offset)
    return result


def _next_power_of_two(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


def _blelloch(a: Optional[np.ndarray], c: np.ndarray) -> Pair:
    """Inclusive scan along axis 0 of a power-of-two length sequence of pairs."""
    size = c.shape[0]
    orig: Pair = (None if a is None else a.copy(), c.copy())
    a = None if a is None else a.copy()
    c = c.copy()

    step = 2
    while step <= size:
        right = np.arange(step - 1, size, step)
        left = right - step // 2
        new_a, new_c = combine((None if a is None else a[left], c[left]), (None if a is None else a[right], c[right]))
        if a is not None:
            a[right] = new_a
        c[right] = new_c
        step *= 2

    if a is not None:
        a[-1] = 1
    c[-1] = 0
    step = size
    while step >= 2:
        right = np.arange(step - 1, size, step)
        left = right - step // 2
        left_pair = (None if a is None else a[left], c[left])
        right_pair = (None if a is None else a[right], c[right])
        new_a, new_c = combine(right_pair, left_pair)
        if a is not None:
            a[left] = right_pair[0]
            a[right] = new_a
        c[left] = right_pair[1]
        c[right] = new_c
        step //= 2

    return combine((a, c), orig)


def _scan_columns(c: np.ndarray, decay: Optional[float]) -> np.ndarray:
    """Run the scan over a ``(T, M)`` array; ``decay=None`` selects the prefix sum."""
    steps = c.shape[0]
    padded = _next_power_of_two(steps)
    if padded != steps:
        c = np.concatenate([c, np.zeros((padded - steps,) + c.shape[1:], dtype=c.dtype)])
    a = None
    if decay is not None:
        a = np.ones((padded, 1), dtype=c.dtype)
        a[:steps] = decay
    _, out = _blelloch(a, c)
    return out[:steps]


def _as_columns(x: Tensor) -> np.ndarray:
    return x.data.reshape(x.shape[0], -1)


def prefix_sum(x: Tensor) -> Tensor:
    """out[t] = x[0] + ... + x[t] along the time axis."""
    out = _scan_columns(_as_columns(x), None).reshape(x.shape)

    def rule(g):
        reversed_columns = np.ascontiguousarray(g.reshape(g.shape[0], -1)[::-1])
        return (_scan_columns(reversed_columns, None)[::-1].reshape(x.shape),)

    return apply_op("prefix_sum", out, (x,), rule)


def linrec_scan(x: Tensor, rec: LinearRecurrence) -> Tensor:
    """out[t] = a^(t+1) * h_init + b * sum_{i<=t} a^(t-i) * x[i]."""
    columns = _as_columns(x)
    out = _scan_columns(columns * rec.b, rec.a)
    if rec.h_init:
        powers = rec.a ** np.arange(1, x.shape[0] + 1, dtype=columns.dtype)
        out = out + rec.h_init * powers[:, None]
    out = out.reshape(x.shape)

    def rule(g):
        reversed_columns = np.ascontiguousarray(g.reshape(g.shape[0], -1)[::-1])
        carried = _scan_columns(reversed_columns, rec.a)[::-1]
        return ((carried * rec.b).reshape(x.shape),)

    return apply_op("linrec_scan", out.astype(x.dtype, copy=False), (x,), rule)


def serial_recurrence(x: np.ndarray, rec: LinearRecurrence) -> np.ndarray:
    """Step-by-step reference: h[t] = a*h[t-1] + b*x[t]."""
    out = np.empty_like(x)
    h = np.full(x.shape[1:], rec.h_init, dtype=x.dtype)
    for t in range(x.shape[0]):
        h = rec.a * h + rec.b * x[t]
        out[t] = h
    return out
