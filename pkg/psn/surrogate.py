"""Heaviside firing with the arctan surrogate gradient.

Forward emits ``S = Theta(h - threshold)`` with ``Theta(0) = 1``. Backward uses

    sigma(x) = alpha / (2 * (1 + (pi/2 * alpha * x)^2))

which is the exact derivative of the relaxed step ``arctan(pi/2 * alpha * x) / pi + 1/2``.
With ``SurrogateConfig(relaxed=True)`` the forward uses that relaxed step, so finite
differences of the forward can be compared against the backward.
"""
from typing import Union

import numpy as np

from psn.models import SurrogateConfig
from psn.tensor import Tensor, apply_op, as_tensor, broadcast_view

DEFAULT_SURROGATE = SurrogateConfig()


def arctan_surrogate(x: np.ndarray, alpha: float) -> np.ndarray:
    return alpha / (2.0 * (1.0 + (np.pi / 2.0 * alpha * x) ** 2))


def relaxed_step(x: np.ndarray, alpha: float) -> np.ndarray:
    return np.arctan(np.pi / 2.0 * alpha * x) / np.pi + 0.5


def heaviside_surrogate(h: Tensor, threshold: Union[Tensor, float],
                        cfg: SurrogateConfig = DEFAULT_SURROGATE) -> Tensor:
    """Fire where ``h >= threshold``; the threshold may be a scalar or hold one value per time step."""
    thr = as_tensor(threshold, like=h)
    thr_view, reduce_thr = broadcast_view(h.shape, thr.data)
    x = h.data - thr_view
    if cfg.relaxed:
        out = relaxed_step(x, cfg.alpha).astype(h.dtype, copy=False)
    else:
        out = (x >= 0).astype(h.dtype)
    del x

    def rule(g):
        # recomputed so the tape does not pin a second (T, N) buffer
        surrogate = g * arctan_surrogate(h.data - thr_view, cfg.alpha)
        grad_h = surrogate if h.requires_grad else None
        grad_thr = reduce_thr(-surrogate) if thr.requires_grad else None
        return grad_h, grad_thr

    return apply_op("heaviside", out, (h, thr), rule)
