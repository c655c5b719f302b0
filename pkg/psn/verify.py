"""Self-check suites run by ``psn verify``.

Each suite returns a :class:`SuiteResult`; a failing suite carries the
inputs of its first failing case as the witness.
"""
import logging
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel

from psn.errors import ContractError, VerificationError
from psn.gradcheck import GRAD_KINDS, run_gradcheck
from psn.models import ResetMode, VanillaNeuronParams
from psn.neurons import (MaskedPSNParams, PSNParams, SlidingPSNParams, build_mask, if_weights, lif_weights,
                         masked_psn_forward, parallel_no_reset, psn_forward, spsn_build_A, spsn_forward,
                         vanilla_sequence)
from psn.scan import serial_recurrence
from psn.tensor import Tape, Tensor, index_time, no_grad, parameter, precision, reduce_sum

logger = logging.getLogger(__name__)

TOLERANCE = 1e-5
CONV_TOLERANCE = 1e-6


class SuiteResult(BaseModel):
    name: str
    passed: bool
    cases: int
    witness: Optional[str] = None


class VerifyOptions(BaseModel):
    seeds: int = 100
    t_values: List[int] = list(range(2, 65))
    n_values: List[int] = [1, 16, 256]
    grad_instances: int = 20


def dyadic_inputs(rng: np.random.Generator, shape) -> np.ndarray:
    """Uniform on the 1/1024 grid in [-2, 2]; running sums of these are exact in float32."""
    return (rng.integers(-2048, 2049, size=shape) / 1024.0).astype(np.float32)


def _spikes_agree(h_ref: np.ndarray, s_ref: np.ndarray, s: np.ndarray, v_th: float) -> bool:
    # Only potentials within rounding distance of the threshold may legitimately fire differently.
    decided = np.abs(h_ref - v_th) > TOLERANCE
    return bool(np.array_equal(s_ref[decided], s[decided]))


def _neurons() -> Dict[str, VanillaNeuronParams]:
    return {
        "if": VanillaNeuronParams(reset_mode=ResetMode.NONE),
        "lif": VanillaNeuronParams(tau_m=2.0, reset_mode=ResetMode.NONE),
    }


def suite_scan(options: VerifyOptions) -> SuiteResult:
    """Serial/parallel equivalence of the reset-free IF and LIF charge."""
    cases = 0
    with no_grad():
        for T in options.t_values:
            for N in options.n_values:
                for seed in range(options.seeds):
                    x = dyadic_inputs(np.random.default_rng([seed, T, N]), (T, N))
                    for name, params in _neurons().items():
                        cases += 1
                        reference = serial_recurrence(x, params.recurrence())
                        trace = parallel_no_reset(Tensor(x), params)
                        error = float(np.max(np.abs(trace.H.data - reference)))
                        spikes = (reference >= params.v_th).astype(np.float32)
                        if error > TOLERANCE or not _spikes_agree(reference, spikes, trace.S.data, params.v_th):
                            return SuiteResult(name="scan", passed=False, cases=cases,
                                               witness=f"{name}: T={T}, N={N}, seed={seed}, max abs error {error:.3g}")
        # the op-level serial neuron agrees with the numpy reference
        for T in options.t_values[:: max(1, len(options.t_values) // 8)]:
            x = dyadic_inputs(np.random.default_rng([T, 0]), (T, 16))
            for name, params in _neurons().items():
                cases += 1
                serial = vanilla_sequence(Tensor(x), params)
                parallel = parallel_no_reset(Tensor(x), params)
                error = float(np.max(np.abs(serial.H.data - parallel.H.data)))
                if error > TOLERANCE or not _spikes_agree(serial.H.data, serial.S.data, parallel.S.data, params.v_th):
                    return SuiteResult(name="scan", passed=False, cases=cases,
                                       witness=f"{name} step-by-step: T={T}, N=16, seed=0, max abs error {error:.3g}")
    return SuiteResult(name="scan", passed=True, cases=cases)


def suite_subsumption(options: VerifyOptions) -> SuiteResult:
    """PSN with IF/LIF weights reproduces the reset-free neurons."""
    cases = 0
    with no_grad():
        for T in (1, 2, 4, 8, 16, 32, 64):
            for seed in range(min(options.seeds, 10)):
                x = dyadic_inputs(np.random.default_rng([seed, T]), (T, 32))
                for name, params in _neurons().items():
                    cases += 1
                    weights = if_weights(T) if params.tau_m is None else lif_weights(T, params.tau_m)
                    psn = PSNParams(W=parameter(weights), B=parameter(np.full(T, params.v_th)))
                    expected = parallel_no_reset(Tensor(x), params)
                    trace = psn_forward(Tensor(x), psn)
                    error = float(np.max(np.abs(trace.H.data - expected.H.data)))
                    if error > TOLERANCE or not _spikes_agree(expected.H.data, expected.S.data, trace.S.data,
                                                               params.v_th):
                        return SuiteResult(name="subsumption", passed=False, cases=cases,
                                           witness=f"{name}: T={T}, N=32, seed={seed}, max abs error {error:.3g}")
    return SuiteResult(name="subsumption", passed=True, cases=cases)


def suite_mask(options: VerifyOptions) -> SuiteResult:
    """Mask layout and causality of the fully masked PSN."""
    cases = 0
    for T in range(1, 9):
        for k in range(1, T + 1):
            cases += 1
            expected = np.array([[1.0 if j <= i <= j + k - 1 else 0.0 for j in range(T)] for i in range(T)])
            if not np.array_equal(build_mask(T, k).data, expected):
                return SuiteResult(name="mask", passed=False, cases=cases, witness=f"build_mask T={T}, k={k}")

            rng = np.random.default_rng([T, k])
            params = MaskedPSNParams.initialize(T, k, rng, lam=1.0)
            x = Tensor(rng.uniform(-2.0, 2.0, size=(T, 4)), requires_grad=True)
            with no_grad():
                base = masked_psn_forward(x, params).H.data
            for t in range(T):
                outside = [i for i in range(T) if i > t or i < t - k + 1]
                for i in outside:
                    perturbed = x.data.copy()
                    perturbed[i] += 10.0
                    with no_grad():
                        moved = masked_psn_forward(Tensor(perturbed), params).H.data
                    if not np.array_equal(moved[t], base[t]):
                        return SuiteResult(name="mask", passed=False, cases=cases,
                                           witness=f"perturbation T={T}, k={k}, t={t}, i={i}")
                with Tape() as tape:
                    loss = reduce_sum(index_time(masked_psn_forward(x, params).H, t))
                tape.backward(loss)
                grad = x.grad
                x.grad = None
                if outside and np.any(grad[outside] != 0):
                    return SuiteResult(name="mask", passed=False, cases=cases,
                                       witness=f"gradient T={T}, k={k}, t={t}, inputs {outside}")
    return SuiteResult(name="mask", passed=True, cases=cases)


def suite_sliding(options: VerifyOptions) -> SuiteResult:
    """Toeplitz layout, matmul/conv path agreement and shift invariance of the sliding PSN."""
    cases = 1
    w0, w1 = 0.25, -1.5
    hand = SlidingPSNParams(W=parameter([w0, w1]), v_th=parameter(1.0))
    if not np.array_equal(spsn_build_A(hand, 3).data, np.array([[w1, 0, 0], [w0, w1, 0], [0, w0, w1]])):
        return SuiteResult(name="sliding", passed=False, cases=cases, witness="spsn_build_A k=2, T=3")

    with no_grad():
        for T in (1, 2, 3, 8, 16, 33, 64):
            for k in sorted({1, 2, 4, 8, T}):
                if k > T:
                    continue
                for seed in range(min(options.seeds, 5)):
                    cases += 1
                    rng = np.random.default_rng([seed, T, k])
                    params = SlidingPSNParams(W=parameter(rng.integers(-8, 9, size=k) / 8.0), v_th=parameter(1.0))
                    x = dyadic_inputs(rng, (T, 8))
                    matmul_path = spsn_forward(Tensor(x), params, path="matmul")
                    conv_path = spsn_forward(Tensor(x), params, path="conv")
                    error = float(np.max(np.abs(matmul_path.H.data - conv_path.H.data)))
                    if error > CONV_TOLERANCE or not np.array_equal(matmul_path.S.data, conv_path.S.data):
                        return SuiteResult(name="sliding", passed=False, cases=cases,
                                           witness=f"matmul vs conv: T={T}, k={k}, seed={seed}, error {error:.3g}")
                    shifted = np.concatenate([np.zeros((1, 8), dtype=x.dtype), x[:-1]])
                    moved = spsn_forward(Tensor(shifted), params, path="matmul").H.data
                    if T > k and not np.array_equal(moved[k:], matmul_path.H.data[k - 1:-1]):
                        return SuiteResult(name="sliding", passed=False, cases=cases,
                                           witness=f"shift invariance: T={T}, k={k}, seed={seed}")
    return SuiteResult(name="sliding", passed=True, cases=cases)


def suite_grad(options: VerifyOptions) -> SuiteResult:
    """Analytic against finite-difference gradients for every layer kind."""
    cases = 0
    for kind in GRAD_KINDS:
        for seed in range(options.grad_instances):
            for result in run_gradcheck(kind, seed):
                cases += 1
                if not result.passed:
                    return SuiteResult(name="grad", passed=False, cases=cases,
                                       witness=f"{kind}.{result.parameter}: seed={seed}, "
                                               f"max rel error {result.max_rel_error:.3g}")
    return SuiteResult(name="grad", passed=True, cases=cases)


SUITES: Dict[str, Callable[[VerifyOptions], SuiteResult]] = {
    "scan": suite_scan,
    "subsumption": suite_subsumption,
    "mask": suite_mask,
    "sliding": suite_sliding,
    "grad": suite_grad,
}


def run_suites(names: Optional[Sequence[str]] = None, options: Optional[VerifyOptions] = None) -> List[SuiteResult]:
    options = options or VerifyOptions()
    selected = list(names) if names else list(SUITES)
    unknown = [name for name in selected if name not in SUITES]
    if unknown:
        raise ContractError(f"unknown suites {unknown}; expected any of {list(SUITES)}")
    results = []
    for name in selected:
        result = SUITES[name](options)
        status = "passed" if result.passed else f"FAILED ({result.witness})"
        logger.info(f"Suite {name}: {status} after {result.cases} cases")
        results.append(result)
    return results


def require(results: Iterable[SuiteResult]) -> None:
    """Raise for the first failing suite."""
    for result in results:
        if not result.passed:
            raise VerificationError(result.name, result.witness or "no witness")
