"""Central finite-difference checks of the analytic gradients.

Checks run in the float64 shadow mode against the relaxed (smooth) firing
forward, whose exact derivative is the surrogate used by backward.
"""
import logging
from typing import Callable, Dict, List, Tuple

import numpy as np
from pydantic import BaseModel

from psn.models import ResetMode, SurrogateConfig, VanillaNeuronParams
from psn.network import Linear
from psn.neurons import (MaskedPSNParams, PSNParams, SlidingPSNParams, masked_psn_forward, psn_forward,
                         spsn_forward, vanilla_sequence)
from psn.tensor import Tape, Tensor, mul, no_grad, precision, reduce_sum, zero_grad

logger = logging.getLogger(__name__)

RELAXED = SurrogateConfig(relaxed=True)
GRAD_KINDS = ("psn", "masked_psn", "spsn", "lif_hard", "if_soft", "linear")

LossFn = Callable[[], Tensor]


class GradCheckResult(BaseModel):
    kind: str
    parameter: str
    seed: int
    max_abs_error: float
    max_rel_error: float
    passed: bool


def numeric_gradient(loss_fn: LossFn, tensor: Tensor, eps: float = 1e-6) -> np.ndarray:
    """d(loss)/d(tensor) by central differences, perturbing ``tensor.data`` in place."""
    grad = np.zeros_like(tensor.data, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    with no_grad():
        for index in range(flat.size):
            original = flat[index]
            flat[index] = original + eps
            upper = float(loss_fn().data)
            flat[index] = original - eps
            lower = float(loss_fn().data)
            flat[index] = original
            grad.reshape(-1)[index] = (upper - lower) / (2.0 * eps)
    return grad


def check_gradients(kind: str, seed: int, loss_fn: LossFn, params: Dict[str, Tensor],
                    rtol: float = 1e-3, atol: float = 1e-7) -> List[GradCheckResult]:
    zero_grad(params.values())
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    results = []
    for name, tensor in params.items():
        analytic = np.zeros(tensor.shape) if tensor.grad is None else tensor.grad.astype(np.float64)
        numeric = numeric_gradient(loss_fn, tensor)
        error = np.abs(analytic - numeric)
        scale = np.maximum(np.abs(analytic), np.abs(numeric))
        rel = np.where(scale > atol, error / np.maximum(scale, atol), 0.0)
        passed = bool(np.all(error <= atol + rtol * scale))
        results.append(GradCheckResult(kind=kind, parameter=name, seed=seed, max_abs_error=float(error.max()),
                                       max_rel_error=float(rel.max()), passed=passed))
    zero_grad(params.values())
    return results


def layer_case(kind: str, seed: int, T: int = 5, N: int = 3) -> Tuple[LossFn, Dict[str, Tensor]]:
    """A scalar loss ``sum(S * R)`` over one layer, and the tensors to check.

    Must be called inside ``precision("float64")``.
    """
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(-1.0, 2.0, size=(T, N)), requires_grad=True)
    projection = Tensor(rng.standard_normal((T, N)))

    if kind == "psn":
        psn = PSNParams.initialize(T, rng)
        params = {"W": psn.W, "B": psn.B}
        spikes = lambda: psn_forward(x, psn, RELAXED).S
    elif kind == "masked_psn":
        masked = MaskedPSNParams.initialize(T, max(1, T // 2), rng, lam=float(rng.uniform(0.0, 1.0)))
        params = {"W": masked.W, "B": masked.B}
        spikes = lambda: masked_psn_forward(x, masked, RELAXED).S
    elif kind == "spsn":
        sliding = SlidingPSNParams.initialize(3, rng, exp_init=False)
        params = {"W": sliding.W, "v_th": sliding.v_th}
        spikes = lambda: spsn_forward(x, sliding, RELAXED).S
    elif kind in ("lif_hard", "if_soft"):
        neuron = (VanillaNeuronParams(tau_m=2.0) if kind == "lif_hard"
                  else VanillaNeuronParams(reset_mode=ResetMode.SOFT))
        params = {"x": x}
        spikes = lambda: vanilla_sequence(x, neuron, RELAXED).S
    elif kind == "linear":
        layer = Linear(N, 4, rng)
        projection = Tensor(rng.standard_normal((T, 4)))
        params = {"weight": layer.weight, "bias": layer.bias, "x": x}
        spikes = lambda: layer(x)
    else:
        raise ValueError(f"unknown gradient-check kind '{kind}'")

    return (lambda: reduce_sum(mul(spikes(), projection))), params


def run_gradcheck(kind: str, seed: int, T: int = 5, N: int = 3) -> List[GradCheckResult]:
    with precision("float64"):
        loss_fn, params = layer_case(kind, seed, T, N)
        results = check_gradients(kind, seed, loss_fn, params)
    for result in results:
        if not result.passed:
            logger.warning(f"Gradient mismatch for {kind}.{result.parameter} (seed {seed}): "
                           f"max rel error {result.max_rel_error:.2e}")
    return results
