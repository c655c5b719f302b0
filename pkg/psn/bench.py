"""Simulation-speed grid and tracked-memory comparison.

Every kind at a given ``(N, T)`` consumes the same input bytes. Speed is
reported as ``t_lif / t_kind`` against the serial LIF baseline, which is always
timed even when it is not part of the requested kinds.
"""
import csv
import gc
import io
import logging
import statistics
import time
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from psn.io import PathLike, atomic_write_text
from psn.models import (BenchConfig, BenchMode, BenchRecord, LayerSpec, MemoryRecord, MemoryReport, ModelSpec,
                        NeuronKind, NeuronSpec, ResetMode, VanillaNeuronParams)
from psn.network import Network
from psn.neurons import (MaskedPSNParams, PSNParams, SlidingPSNParams, SpikeTrace, masked_psn_forward,
                         parallel_no_reset, psn_forward, spsn_forward, vanilla_sequence)
from psn.tensor import Tape, Tensor, no_grad, reduce_mean, reduce_sum, set_num_threads, track_allocations

logger = logging.getLogger(__name__)

BASELINE_KIND = "lif"
CSV_COLUMNS = ("neuron_kind", "N", "T", "mode", "wall_time_seconds", "ratio_vs_baseline", "status", "threads")
TAU_M = 2.0

Forward = Callable[[Tensor], SpikeTrace]


def bench_order(T: int) -> int:
    """Order k used for the masked and sliding PSN cells."""
    return max(1, T // 2)


def bench_input(seed: int, N: int, T: int) -> np.ndarray:
    """Deterministic ``(T, N)`` input currents for one grid cell."""
    rng = np.random.default_rng([seed, N, T])
    return rng.uniform(-0.5, 1.5, size=(T, N)).astype(np.float32)


def build_kind(kind: str, T: int, seed: int) -> Forward:
    rng = np.random.default_rng(seed)
    if kind == "lif":
        params = VanillaNeuronParams(tau_m=TAU_M)
        return lambda x: vanilla_sequence(x, params, record_h=False)
    if kind == "if":
        params = VanillaNeuronParams()
        return lambda x: vanilla_sequence(x, params, record_h=False)
    if kind == "lif_parallel":
        params = VanillaNeuronParams(tau_m=TAU_M, reset_mode=ResetMode.NONE)
        return lambda x: parallel_no_reset(x, params)
    if kind == "psn":
        psn = PSNParams.initialize(T, rng)
        return lambda x: psn_forward(x, psn)
    if kind == "masked_psn":
        masked = MaskedPSNParams.initialize(T, bench_order(T), rng, lam=1.0)
        return lambda x: masked_psn_forward(x, masked)
    sliding = SlidingPSNParams.initialize(bench_order(T))
    path = "conv" if kind == "spsn_conv" else "matmul"
    return lambda x: spsn_forward(x, sliding, path=path)


def _time_once(forward: Forward, data: np.ndarray, mode: BenchMode) -> float:
    if mode == BenchMode.INFERENCE:
        x = Tensor(data)
        start = time.perf_counter()
        with no_grad():
            forward(x)
        return time.perf_counter() - start
    x = Tensor(data, requires_grad=True)
    start = time.perf_counter()
    with Tape() as tape:
        loss = reduce_sum(forward(x).S)
    tape.backward(loss)
    return time.perf_counter() - start


def time_kind(forward: Forward, data: np.ndarray, mode: BenchMode, warmup: int, measured: int) -> float:
    """Median wall time of ``measured`` runs after ``warmup`` runs."""
    for _ in range(warmup):
        _time_once(forward, data, mode)
    samples = [_time_once(forward, data, mode) for _ in range(measured)]
    # perf_counter can report 0 for trivially small cells
    return max(statistics.median(samples), 1e-9)


def _cell(kind: str, N: int, T: int, cfg: BenchConfig, mode: BenchMode, data: np.ndarray) -> Optional[float]:
    if cfg.skip_large and N >= cfg.large_n:
        logger.info(f"Skipping {kind} at N={N}, T={T}: large cells disabled")
        return None
    if kind == "spsn_conv" and mode == BenchMode.TRAINING:
        logger.info(f"Skipping {kind} at N={N}, T={T}: the conv path has no backward")
        return None
    try:
        return time_kind(build_kind(kind, T, cfg.seed), data, mode, cfg.warmup_iters, cfg.measured_iters)
    except MemoryError:
        logger.warning(f"Out of memory for {kind} at N={N}, T={T}; cell skipped")
        return None
    finally:
        gc.collect()


def run_grid(cfg: BenchConfig, mode: Optional[BenchMode] = None) -> List[BenchRecord]:
    mode = mode or cfg.mode
    set_num_threads(cfg.threads)
    records: List[BenchRecord] = []
    for N in cfg.n_values:
        for T in cfg.t_values:
            data = bench_input(cfg.seed, N, T)
            times: Dict[str, Optional[float]] = {}
            for kind in dict.fromkeys([BASELINE_KIND] + list(cfg.neuron_kinds)):
                times[kind] = _cell(kind, N, T, cfg, mode, data)
            baseline = times[BASELINE_KIND]
            for kind in cfg.neuron_kinds:
                elapsed = times[kind]
                ratio = baseline / elapsed if (elapsed is not None and baseline is not None) else None
                records.append(BenchRecord(neuron_kind=kind, N=N, T=T, mode=mode, wall_time_seconds=elapsed,
                                           ratio_vs_baseline=ratio, status="ok" if elapsed is not None else "skipped",
                                           threads=cfg.threads))
            logger.info(f"Timed N={N}, T={T} ({mode.value})")
    return records


def bench_forward(cfg: BenchConfig) -> List[BenchRecord]:
    return run_grid(cfg, BenchMode.INFERENCE)


def bench_training(cfg: BenchConfig) -> List[BenchRecord]:
    return run_grid(cfg, BenchMode.TRAINING)


# ---------------------------------------------------------------------------
# memory

MEMORY_CONFIGURATIONS = ("no_neuron", "if_neuron", "psn")


def memory_model(configuration: str, T: int, width: int, depth: int) -> ModelSpec:
    """``depth`` square synapse layers, with IF or PSN layers between them for the spiking configurations."""
    neuron = {"if_neuron": NeuronSpec(kind=NeuronKind.IF), "psn": NeuronSpec(kind=NeuronKind.PSN)}.get(configuration)
    layers: List[LayerSpec] = []
    for index in range(depth):
        layers.append(LayerSpec(kind="linear", in_features=width, out_features=width))
        if neuron is not None and index < depth - 1:
            layers.append(LayerSpec(kind="neuron", neuron=neuron))
    return ModelSpec(time_steps=T, layers=layers, seed=0)


def measure_step(configuration: str, T: int, batch: int, width: int, depth: int) -> int:
    """Peak tracked bytes of one forward/backward step, relative to what was live before it."""
    gc.collect()
    rng = np.random.default_rng([T, batch, width])
    with track_allocations() as tracker:
        before = tracker.live_bytes
        network = Network(memory_model(configuration, T, width, depth))
        x = Tensor(rng.uniform(0.0, 1.0, size=(T, batch, width)))
        with Tape() as tape:
            logits, _ = network.forward(x)
            loss = reduce_mean(logits)
        tape.backward(loss)
        peak = tracker.peak_bytes - before
    del tape, loss, logits, network, x
    gc.collect()
    return peak


def bench_memory(T: int, N: int, batch: int = 16, depth: int = 3) -> MemoryReport:
    """Tracked peak memory of one training step with no neurons, IF neurons and PSN.

    ``N`` is the layer width; the gap column divides by ``T * N``.
    """
    records = [MemoryRecord(configuration=name, T=T, N=N, peak_tracked_bytes=measure_step(name, T, batch, N, depth))
               for name in MEMORY_CONFIGURATIONS]
    peaks = {record.configuration: record.peak_tracked_bytes for record in records}
    delta_if = peaks["if_neuron"] - peaks["no_neuron"]
    delta_psn = peaks["psn"] - peaks["no_neuron"]
    ratio = delta_if / delta_psn if delta_psn else float("inf")
    report = MemoryReport(T=T, N=N, records=records, delta_if=delta_if, delta_psn=delta_psn, ratio=ratio,
                          gap_per_neuron=(delta_if - delta_psn) / (T * N))
    logger.info(f"Memory at T={T}, N={N}: delta IF {delta_if} B, delta PSN {delta_psn} B, ratio {ratio:.2f}")
    return report


# ---------------------------------------------------------------------------
# reports

def _csv_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(getattr(value, "value", value))


def records_to_csv(records: Iterable[BenchRecord]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for record in records:
        writer.writerow([_csv_value(getattr(record, column)) for column in CSV_COLUMNS])
    return buffer.getvalue()


def write_csv(path: PathLike, records: Iterable[BenchRecord]) -> Path:
    return atomic_write_text(path, records_to_csv(records))


def read_csv(path: PathLike) -> List[BenchRecord]:
    with open(path, newline="") as handle:
        rows = list(csv.DictReader(handle))
    return [BenchRecord(**{key: (value if value != "" else None) for key, value in row.items()}) for row in rows]


def format_grid(records: Sequence[BenchRecord]) -> str:
    """One block per (kind, mode): rows are T, columns are N, cells are t_lif / t_kind."""
    blocks: List[str] = []
    keys = list(dict.fromkeys((r.neuron_kind, r.mode) for r in records))
    for kind, mode in keys:
        subset = [r for r in records if r.neuron_kind == kind and r.mode == mode]
        n_values = sorted({r.N for r in subset})
        t_values = sorted({r.T for r in subset})
        cells = {(r.N, r.T): r for r in subset}
        lines = [f"{kind} ({mode.value}) t_lif / t_{kind}",
                 "T \\ N".ljust(8) + "".join(f"{n:>12}" for n in n_values)]
        for T in t_values:
            row = f"{T:<8}"
            for N in n_values:
                record = cells.get((N, T))
                if record is None:
                    row += f"{'-':>12}"
                elif record.status == "skipped" or record.ratio_vs_baseline is None:
                    row += f"{'skipped':>12}"
                else:
                    row += f"{record.ratio_vs_baseline:>12.2f}"
            lines.append(row)
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def format_memory_table(reports: Sequence[MemoryReport]) -> str:
    header = ("T", "N", "M_NO", "M_IF", "M_PSN", "d_IF-NO", "d_PSN-NO", "ratio", "gap/(T*N)")
    lines = ["".join(f"{h:>12}" for h in header)]
    for report in reports:
        peaks = {r.configuration: r.peak_tracked_bytes for r in report.records}
        values = (report.T, report.N, peaks["no_neuron"], peaks["if_neuron"], peaks["psn"],
                  report.delta_if, report.delta_psn, f"{report.ratio:.2f}", f"{report.gap_per_neuron:.1f}")
        lines.append("".join(f"{v:>12}" for v in values))
    return "\n".join(lines) + "\n"
