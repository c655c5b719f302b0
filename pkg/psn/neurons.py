"""Neuron dynamics.

Vanilla IF/LIF neurons run the charge/fire/reset loop serially, one fused tape
entry per phase and time step. Without reset the charge is a linear recurrence
and is evaluated in parallel by :mod:`psn.scan`. The PSN family replaces the
recurrence by a weight matrix over time steps:

    PSN           H = W X,                      W in R^{T x T}
    masked PSN    H = (W o M_k(lambda)) X,      M_k banded lower-triangular
    sliding PSN   H[t] = sum_i W_i X[t-k+1+i],  W in R^k shared over time

and all of them fire with ``S = Theta(H - threshold)``.
"""
import logging
import math
from collections import deque
from typing import Deque, List, Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from psn.errors import ContractError, DimensionError
from psn.models import NeuronKind, ResetMode, SurrogateConfig, VanillaNeuronParams
from psn.scan import linrec_scan, prefix_sum
from psn.surrogate import DEFAULT_SURROGATE, heaviside_surrogate
from psn.tensor import (Tensor, apply_op, as_tensor, default_dtype, detach, index_time, matmul, mul,
                        parameter, reshape, stack, zeros)

logger = logging.getLogger(__name__)

State = Tuple[Tensor, Tensor]


class SpikeTrace(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    H: Optional[Tensor] = None  # omitted when the caller only needs spikes
    S: Tensor
    firing_rate_per_layer: List[float] = Field(default_factory=list)

    @classmethod
    def from_spikes(cls, H: Optional[Tensor], S: Tensor) -> "SpikeTrace":
        return cls(H=H, S=S, firing_rate_per_layer=[firing_rate(S)])


def firing_rate(S: Tensor) -> float:
    return float(S.data.mean()) if S.size else 0.0


# ---------------------------------------------------------------------------
# initialisation

def kaiming_uniform(shape: Tuple[int, ...], fan_in: int, rng: np.random.Generator,
                    a: float = math.sqrt(5)) -> np.ndarray:
    """Kaiming-uniform with negative slope ``a``; ``a = sqrt(5)`` gives U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    gain = math.sqrt(2.0 / (1.0 + a * a))
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def exponential_decay(k: int) -> np.ndarray:
    """W_i = 2^(i-k+1): the weights of a reset-free LIF neuron with tau_m = 2, up to scale."""
    return 2.0 ** (np.arange(k) - k + 1)


def if_weights(T: int) -> np.ndarray:
    """PSN weights reproducing the reset-free IF charge: W[t, i] = Theta(t - i)."""
    return np.tril(np.ones((T, T)))


def lif_weights(T: int, tau_m: float) -> np.ndarray:
    """PSN weights reproducing the reset-free LIF charge: (1/tau)(1-1/tau)^(t-i) Theta(t-i)."""
    lag = np.arange(T)[:, None] - np.arange(T)[None, :]
    decay = (1.0 - 1.0 / tau_m) ** np.clip(lag, 0, None)
    return np.where(lag >= 0, decay / tau_m, 0.0)


# ---------------------------------------------------------------------------
# vanilla neurons

def _charge(x_t: Tensor, v_prev: Tensor, p: VanillaNeuronParams) -> Tensor:
    if p.is_leaky:
        decay, gain = 1.0 - 1.0 / p.tau_m, 1.0 / p.tau_m
        return apply_op("charge", v_prev.data * decay + x_t.data * gain, (v_prev, x_t),
                        lambda g: (g * decay, g * gain))
    return apply_op("charge", v_prev.data + x_t.data, (v_prev, x_t), lambda g: (g, g))


def _reset(h: Tensor, s: Tensor, p: VanillaNeuronParams) -> Tensor:
    # With detach_reset the spike inside the reset is a constant for backward.
    spike_grad = not p.detach_reset
    if p.reset_mode == ResetMode.HARD:
        v_reset = p.v_reset
        out = h.data * (1.0 - s.data) + v_reset * s.data

        def rule(g):
            return g * (1.0 - s.data), (g * (v_reset - h.data) if spike_grad else None)
    else:
        v_th = p.v_th
        out = h.data - v_th * s.data

        def rule(g):
            return g, (g * -v_th if spike_grad else None)

    return apply_op("reset", out, (h, s), rule)


def vanilla_step(x_t: Tensor, state: Optional[State], p: VanillaNeuronParams,
                 cfg: SurrogateConfig = DEFAULT_SURROGATE) -> Tuple[Tensor, State]:
    """One charge/fire/reset step. ``state`` is ``(H[t-1], V[t-1])``; ``None`` starts from zero."""
    v_prev = zeros(x_t.shape) if state is None else state[1]
    h = _charge(x_t, v_prev, p)
    s = heaviside_surrogate(h, p.v_th, cfg)
    v = h if p.reset_mode == ResetMode.NONE else _reset(h, s, p)
    return s, (h, v)


def vanilla_sequence(x: Tensor, p: VanillaNeuronParams, cfg: SurrogateConfig = DEFAULT_SURROGATE,
                     record_h: bool = True) -> SpikeTrace:
    """Serial simulation over the leading time axis; O(T) steps."""
    state: Optional[State] = None
    spikes: List[Tensor] = []
    potentials: List[Tensor] = []
    for t in range(x.shape[0]):
        s, state = vanilla_step(index_time(x, t), state, p, cfg)
        spikes.append(s)
        if record_h:
            potentials.append(state[0])
    H = stack(potentials) if record_h else None
    return SpikeTrace.from_spikes(H, stack(spikes))


def parallel_no_reset(x: Tensor, p: VanillaNeuronParams, cfg: SurrogateConfig = DEFAULT_SURROGATE) -> SpikeTrace:
    """Reset-free IF/LIF with the charge computed for all time steps at once."""
    if p.reset_mode != ResetMode.NONE:
        raise ContractError(f"reset is not parallelizable: reset_mode must be 'none', got '{p.reset_mode.value}'")
    H = linrec_scan(x, p.recurrence()) if p.is_leaky else prefix_sum(x)
    return SpikeTrace.from_spikes(H, heaviside_surrogate(H, p.v_th, cfg))


# ---------------------------------------------------------------------------
# PSN

class PSNParams(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    W: Tensor
    B: Tensor

    @model_validator(mode="after")
    def _square_weights(self) -> "PSNParams":
        _check_time_weights(self.W, self.B)
        return self

    @property
    def T(self) -> int:
        return self.W.shape[0]

    @classmethod
    def initialize(cls, T: int, rng: np.random.Generator) -> "PSNParams":
        return cls(W=parameter(kaiming_uniform((T, T), T, rng)), B=parameter(np.ones(T)))


def _check_time_weights(W: Tensor, B: Tensor) -> None:
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise DimensionError(f"W must be square (T x T), got {W.shape}")
    if B.shape != (W.shape[0],):
        raise DimensionError(f"B must have shape ({W.shape[0]},), got {B.shape}")


def _weighted_fire(x: Tensor, weight: Tensor, threshold: Union[Tensor, float], cfg: SurrogateConfig) -> SpikeTrace:
    """H = weight @ X over the time axis, then fire; trailing axes of ``x`` are batch."""
    if x.shape[0] != weight.shape[1]:
        raise DimensionError(f"input has {x.shape[0]} time steps but the weights expect {weight.shape[1]}")
    H = matmul(weight, reshape(x, (x.shape[0], -1)))
    S = heaviside_surrogate(H, threshold, cfg)
    return SpikeTrace.from_spikes(reshape(H, x.shape), reshape(S, x.shape))


def psn_forward(x: Tensor, p: PSNParams, cfg: SurrogateConfig = DEFAULT_SURROGATE) -> SpikeTrace:
    return _weighted_fire(x, p.W, p.B, cfg)


# ---------------------------------------------------------------------------
# masked PSN

def build_mask(T: int, k: int) -> Tensor:
    """M_k[i][j] = 1 for j <= i <= j + k - 1, else 0."""
    if not 1 <= k <= T:
        raise ContractError(f"order k must satisfy 1 <= k <= T={T}, got {k}")
    i = np.arange(T)[:, None]
    j = np.arange(T)[None, :]
    return Tensor(((j <= i) & (i <= j + k - 1)).astype(default_dtype()))


def blend_mask(mask: Tensor, lam: float) -> Tensor:
    """M_k(lambda) = lambda * M_k + (1 - lambda) * ones."""
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lambda must lie in [0, 1], got {lam}")
    return Tensor(lam * mask.data + (1.0 - lam), dtype=mask.dtype)


class MaskedPSNParams(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, validate_assignment=True, populate_by_name=True)

    W: Tensor
    B: Tensor
    order_k: int = Field(ge=1)
    lambda_: float = Field(default=0.0, ge=0.0, le=1.0, alias="lambda")

    @model_validator(mode="after")
    def _order_within_T(self) -> "MaskedPSNParams":
        _check_time_weights(self.W, self.B)
        if self.order_k > self.W.shape[0]:
            raise ValueError(f"order_k must be <= T={self.W.shape[0]}, got {self.order_k}")
        return self

    @property
    def T(self) -> int:
        return self.W.shape[0]

    @classmethod
    def initialize(cls, T: int, k: int, rng: np.random.Generator, lam: float = 0.0) -> "MaskedPSNParams":
        return cls(W=parameter(kaiming_uniform((T, T), T, rng)), B=parameter(np.ones(T)), order_k=k, lambda_=lam)

    def effective_weight(self) -> Tensor:
        """W o M_k(lambda); the mask is a constant so gradients reach only W."""
        return mul(self.W, blend_mask(build_mask(self.T, self.order_k), self.lambda_))


def masked_psn_forward(x: Tensor, p: MaskedPSNParams, cfg: SurrogateConfig = DEFAULT_SURROGATE) -> SpikeTrace:
    return _weighted_fire(x, p.effective_weight(), p.B, cfg)


def lambda_schedule(epoch: int, epochs: int) -> float:
    """Progressive masking: lambda = min(1, 8 * epoch / (epochs - 1))."""
    if epochs < 2 or not 0 <= epoch < epochs:
        raise ContractError(f"lambda_schedule needs epochs >= 2 and 0 <= epoch < epochs, got {epoch}/{epochs}")
    return min(1.0, 8.0 * epoch / (epochs - 1))


# ---------------------------------------------------------------------------
# sliding PSN

class SlidingPSNParams(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    W: Tensor  # oldest -> newest, W_0 ... W_{k-1}
    v_th: Tensor

    @field_validator("W")
    @classmethod
    def _vector(cls, W: Tensor) -> Tensor:
        if W.ndim != 1 or W.shape[0] < 1:
            raise ValueError(f"W must be a non-empty vector, got shape {W.shape}")
        return W

    @field_validator("v_th")
    @classmethod
    def _scalar(cls, v_th: Tensor) -> Tensor:
        if v_th.ndim != 0:
            raise ValueError(f"v_th must be a scalar, got shape {v_th.shape}")
        return v_th

    @property
    def k(self) -> int:
        return self.W.shape[0]

    @classmethod
    def initialize(cls, k: int, rng: Optional[np.random.Generator] = None, exp_init: bool = True) -> "SlidingPSNParams":
        if exp_init:
            weight = exponential_decay(k)
        else:
            if rng is None:
                raise ContractError("kaiming initialisation of the sliding PSN needs a generator")
            weight = kaiming_uniform((k,), k, rng)
        return cls(W=parameter(weight), v_th=parameter(np.asarray(1.0)))


def _band_indices(T: int, k: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows, cols = np.nonzero(np.tri(T, T, dtype=bool) & ~np.tri(T, T, -k, dtype=bool))
    return rows, cols, k - 1 - (rows - cols)


def spsn_build_A(p: SlidingPSNParams, T: int) -> Tensor:
    """Banded Toeplitz matrix A[i][j] = W_{k-1-i+j} for i+1-k <= j <= i, so that H = A X."""
    if T < 1:
        raise ContractError(f"T must be >= 1, got {T}")
    k = p.k
    rows, cols, taps = _band_indices(T, k)
    A = np.zeros((T, T), dtype=p.W.dtype)
    A[rows, cols] = p.W.data[taps]

    def rule(g):
        grad = np.zeros(k, dtype=g.dtype)
        np.add.at(grad, taps, g[rows, cols])
        return (grad,)

    return apply_op("toeplitz", A, (p.W,), rule)


def spsn_conv_charge(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """H[t] = sum_i W_i X[t-k+1+i] as a 1-D convolution over the zero-padded time axis."""
    k = weight.shape[0]
    columns = x.reshape(x.shape[0], -1)
    padded = np.concatenate([np.zeros((k - 1, columns.shape[1]), dtype=columns.dtype), columns])
    windows = sliding_window_view(padded, k, axis=0)  # (T, M, k)
    return (windows @ weight.astype(columns.dtype)).reshape(x.shape)


def spsn_forward(x: Tensor, p: SlidingPSNParams, cfg: SurrogateConfig = DEFAULT_SURROGATE,
                 path: str = "matmul") -> SpikeTrace:
    """Sliding PSN for any sequence length. Only the matmul path is differentiable."""
    if path == "matmul":
        return _weighted_fire(x, spsn_build_A(p, x.shape[0]), p.v_th, cfg)
    if path == "conv":
        H = Tensor(spsn_conv_charge(x.data, p.W.data), dtype=x.dtype)
        S = Tensor((H.data >= p.v_th.data).astype(x.dtype), dtype=x.dtype)
        return SpikeTrace.from_spikes(H, S)
    raise ContractError(f"unknown sliding PSN path '{path}', expected 'matmul' or 'conv'")


# ---------------------------------------------------------------------------
# step-by-step inference

class MaskedPSNStepper:
    """Runs a fully masked PSN one time step at a time from a queue of the latest k inputs."""

    def __init__(self, params: MaskedPSNParams):
        if params.lambda_ < 1.0:
            raise ContractError(f"step-by-step mode needs lambda = 1, got {params.lambda_}")
        self.params = params
        self.queue: Deque[np.ndarray] = deque(maxlen=params.order_k)
        self.time_step = 0

    def step(self, x_t: Tensor) -> Tensor:
        p = self.params
        if self.time_step >= p.T:
            raise ContractError(f"the masked PSN (T={p.T}) has already run {p.T} time steps")
        self.queue.append(x_t.data)
        t = self.time_step
        weight = p.W.data[t, t + 1 - len(self.queue): t + 1]
        h = np.tensordot(weight, np.stack(self.queue), axes=1)
        self.time_step += 1
        return Tensor((h >= p.B.data[t]).astype(x_t.dtype), dtype=x_t.dtype)

    def reset(self) -> None:
        self.queue.clear()
        self.time_step = 0


class SlidingPSNStepper:
    """Runs a sliding PSN one time step at a time; no bound on the sequence length."""

    def __init__(self, params: SlidingPSNParams):
        self.params = params
        self.queue: Deque[np.ndarray] = deque(maxlen=params.k)

    def step(self, x_t: Tensor) -> Tensor:
        p = self.params
        self.queue.append(x_t.data)
        weight = p.W.data[p.k - len(self.queue):]
        h = np.tensordot(weight, np.stack(self.queue), axes=1)
        return Tensor((h >= p.v_th.data).astype(x_t.dtype), dtype=x_t.dtype)

    def reset(self) -> None:
        self.queue.clear()


# ---------------------------------------------------------------------------
# accounting

def param_count(neuron_kind: Union[NeuronKind, str], T: int, k: Optional[int] = None) -> int:
    """Learnable parameters of one neuron layer; masks are not parameters."""
    kind = NeuronKind(neuron_kind)
    if kind in (NeuronKind.PSN, NeuronKind.MASKED_PSN):
        return T * T + T
    if kind == NeuronKind.SLIDING_PSN:
        if k is None:
            raise ContractError("the sliding PSN parameter count needs the order k")
        return k + 1
    return 0
