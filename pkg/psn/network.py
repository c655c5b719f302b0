"""Sequence classifiers assembled from synapse and neuron layers.

Inputs and activations keep time outermost: ``(T, N, features)``. Synapse
layers act on every time step independently; neuron layers integrate over time.
"""
import logging
import math
from typing import Dict, List, Optional, Protocol, Tuple

import numpy as np

from psn.errors import ContractError, DimensionError
from psn.models import LayerSpec, ModelSpec, NeuronKind, NeuronSpec, ResetMode, SurrogateConfig, VanillaNeuronParams
from psn.neurons import (MaskedPSNParams, PSNParams, SlidingPSNParams, SpikeTrace, kaiming_uniform,
                         masked_psn_forward, parallel_no_reset, psn_forward, spsn_forward, vanilla_sequence)
from psn.surrogate import DEFAULT_SURROGATE
from psn.tensor import Tensor, add_bias, matmul, parameter, reshape

logger = logging.getLogger(__name__)


class NeuronLayer(Protocol):
    kind: NeuronKind

    def __call__(self, x: Tensor) -> SpikeTrace:
        ...

    def named_parameters(self) -> Dict[str, Tensor]:
        ...


class VanillaLayer:
    """IF/LIF neurons; the reset-free kinds run on the parallel scan."""

    def __init__(self, kind: NeuronKind, params: VanillaNeuronParams, cfg: SurrogateConfig = DEFAULT_SURROGATE):
        self.kind = kind
        self.params = params
        self.cfg = cfg

    def __call__(self, x: Tensor) -> SpikeTrace:
        if self.params.reset_mode == ResetMode.NONE:
            return parallel_no_reset(x, self.params, self.cfg)
        return vanilla_sequence(x, self.params, self.cfg, record_h=False)

    def named_parameters(self) -> Dict[str, Tensor]:
        return {}


class PSNLayer:
    kind = NeuronKind.PSN

    def __init__(self, params: PSNParams, cfg: SurrogateConfig = DEFAULT_SURROGATE):
        self.params = params
        self.cfg = cfg

    def __call__(self, x: Tensor) -> SpikeTrace:
        return psn_forward(x, self.params, self.cfg)

    def named_parameters(self) -> Dict[str, Tensor]:
        return {"W": self.params.W, "B": self.params.B}


class MaskedPSNLayer:
    kind = NeuronKind.MASKED_PSN

    def __init__(self, params: MaskedPSNParams, cfg: SurrogateConfig = DEFAULT_SURROGATE):
        self.params = params
        self.cfg = cfg

    @property
    def lambda_(self) -> float:
        return self.params.lambda_

    def set_lambda(self, lam: float) -> None:
        self.params.lambda_ = lam

    def __call__(self, x: Tensor) -> SpikeTrace:
        return masked_psn_forward(x, self.params, self.cfg)

    def named_parameters(self) -> Dict[str, Tensor]:
        return {"W": self.params.W, "B": self.params.B}


class SlidingPSNLayer:
    kind = NeuronKind.SLIDING_PSN

    def __init__(self, params: SlidingPSNParams, cfg: SurrogateConfig = DEFAULT_SURROGATE):
        self.params = params
        self.cfg = cfg

    def __call__(self, x: Tensor) -> SpikeTrace:
        return spsn_forward(x, self.params, self.cfg, path="matmul")

    def named_parameters(self) -> Dict[str, Tensor]:
        return {"W": self.params.W, "v_th": self.params.v_th}


class Linear:
    """Per-time-step synapse ``y = x W + b`` with ``W`` stored as ``(in, out)``."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = parameter(kaiming_uniform((in_features, out_features), in_features, rng))
        bound = 1.0 / math.sqrt(in_features)
        self.bias = parameter(rng.uniform(-bound, bound, size=out_features))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise DimensionError(f"linear layer expects {self.in_features} features, got {x.shape[-1]}")
        leading = x.shape[:-1]
        flat = reshape(x, (-1, self.in_features))
        out = add_bias(matmul(flat, self.weight), self.bias)
        return reshape(out, leading + (self.out_features,))

    def named_parameters(self) -> Dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


def build_neuron_layer(spec: NeuronSpec, time_steps: int, rng: np.random.Generator,
                       cfg: SurrogateConfig = DEFAULT_SURROGATE) -> NeuronLayer:
    kind = spec.kind
    if kind.is_vanilla:
        leaky = kind in (NeuronKind.LIF, NeuronKind.LIF_NO_RESET)
        no_reset = kind in (NeuronKind.IF_NO_RESET, NeuronKind.LIF_NO_RESET)
        params = VanillaNeuronParams(
            tau_m=spec.tau_m if leaky else None,
            v_th=spec.v_th,
            v_reset=spec.v_reset,
            reset_mode=ResetMode.NONE if no_reset else spec.reset_mode,
            detach_reset=spec.detach_reset,
        )
        return VanillaLayer(kind, params, cfg)
    if kind == NeuronKind.PSN:
        return PSNLayer(PSNParams.initialize(time_steps, rng), cfg)
    order = spec.order if spec.order is not None else time_steps
    if kind == NeuronKind.MASKED_PSN:
        if order > time_steps:
            raise ContractError(f"masked PSN order {order} exceeds T={time_steps}")
        return MaskedPSNLayer(MaskedPSNParams.initialize(time_steps, order, rng, lam=spec.lambda_init), cfg)
    return SlidingPSNLayer(SlidingPSNParams.initialize(order), cfg)


class Network:
    """Alternating synapse/neuron stack with a linear classifier head."""

    def __init__(self, spec: ModelSpec, cfg: SurrogateConfig = DEFAULT_SURROGATE):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        self.layers: List = [self._build(layer, rng, cfg) for layer in spec.layers]
        logger.info(f"Built network with {len(self.layers)} layers and {self.param_count()} parameters")

    def _build(self, layer: LayerSpec, rng: np.random.Generator, cfg: SurrogateConfig):
        if layer.kind == "linear":
            return Linear(layer.in_features, layer.out_features, rng)
        return build_neuron_layer(layer.neuron, self.spec.time_steps, rng, cfg)

    @property
    def neuron_layers(self) -> List[NeuronLayer]:
        return [layer for layer in self.layers if not isinstance(layer, Linear)]

    @property
    def masked_layers(self) -> List[MaskedPSNLayer]:
        return [layer for layer in self.layers if isinstance(layer, MaskedPSNLayer)]

    def set_lambda(self, lam: float) -> None:
        for layer in self.masked_layers:
            layer.set_lambda(lam)

    def current_lambda(self) -> Optional[float]:
        masked = self.masked_layers
        return masked[0].lambda_ if masked else None

    def forward(self, x: Tensor) -> Tuple[Tensor, List[float]]:
        """Logits ``(T, N, classes)`` and the firing rate of every neuron layer."""
        if x.ndim != 3:
            raise DimensionError(f"network input must be (T, N, features), got {x.shape}")
        if x.shape[0] != self.spec.time_steps:
            raise DimensionError(f"network built for T={self.spec.time_steps}, got {x.shape[0]} time steps")
        rates: List[float] = []
        out = x
        for layer in self.layers:
            if isinstance(layer, Linear):
                out = layer(out)
            else:
                trace = layer(out)
                rates.extend(trace.firing_rate_per_layer)
                out = trace.S
        return out, rates

    __call__ = forward

    def predict(self, logits: Tensor) -> np.ndarray:
        """Class index per sample from the time-averaged logits, or from the last step for per-step heads."""
        if self.spec.head == "per_step":
            return logits.data[-1].argmax(axis=1)
        return logits.data.mean(axis=0).argmax(axis=1)

    def named_parameters(self) -> Dict[str, Tensor]:
        named: Dict[str, Tensor] = {}
        for index, layer in enumerate(self.layers):
            for name, tensor in layer.named_parameters().items():
                named[f"layers.{index}.{name}"] = tensor
        return named

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def param_count(self) -> int:
        return sum(tensor.size for tensor in self.parameters())

    def load_state(self, arrays: Dict[str, np.ndarray]) -> None:
        """Copy checkpoint arrays into the parameters; names and shapes must match exactly."""
        named = self.named_parameters()
        missing = sorted(set(named) - set(arrays))
        unexpected = sorted(set(arrays) - set(named))
        if missing or unexpected:
            raise ContractError(f"checkpoint does not match the model: missing {missing}, unexpected {unexpected}")
        for name, tensor in named.items():
            value = arrays[name]
            if value.shape != tensor.shape:
                raise DimensionError(f"checkpoint entry {name} has shape {value.shape}, model expects {tensor.shape}")
            tensor.data[...] = value
