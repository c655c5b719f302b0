import numpy as np
import pytest
from pydantic import ValidationError

from psn.bench import (CSV_COLUMNS, bench_forward, bench_input, bench_memory, bench_order, bench_training,
                       format_grid, format_memory_table, memory_model, read_csv, write_csv)
from psn.models import BenchConfig, BenchMode
from psn.tensor import set_num_threads


@pytest.fixture
def small_grid():
    return BenchConfig(neuron_kinds=["lif", "psn"], n_values=[4, 8], t_values=[2, 4], warmup_iters=0,
                       measured_iters=3)


@pytest.fixture(autouse=True)
def single_thread():
    yield
    set_num_threads(1)


class TestSpeedGrid:
    """Timing grid against the serial LIF baseline"""

    def test_one_record_per_cell(self, small_grid):
        """2 kinds x 2 N x 2 T give 8 timed records"""
        records = bench_forward(small_grid)
        assert len(records) == 8
        assert all(r.status == "ok" and r.wall_time_seconds > 0 for r in records)
        assert {r.mode for r in records} == {BenchMode.INFERENCE}

    def test_baseline_ratio_is_one(self):
        """Benchmarking only the baseline gives ratio 1.0 everywhere"""
        cfg = BenchConfig(neuron_kinds=["lif"], n_values=[4], t_values=[2, 8], warmup_iters=0, measured_iters=3)
        assert [r.ratio_vs_baseline for r in bench_forward(cfg)] == [1.0, 1.0]

    def test_baseline_always_timed(self):
        """A grid without lif still reports ratios"""
        cfg = BenchConfig(neuron_kinds=["spsn"], n_values=[4], t_values=[4], warmup_iters=0, measured_iters=3)
        assert bench_forward(cfg)[0].ratio_vs_baseline > 0

    def test_skip_large(self, small_grid):
        """Cells at or above the large-N bound are skipped with an empty time"""
        cfg = small_grid.model_copy(update={"skip_large": True, "large_n": 8})
        skipped = [r for r in bench_forward(cfg) if r.N == 8]
        assert skipped and all(r.status == "skipped" and r.wall_time_seconds is None for r in skipped)

    def test_training_mode(self):
        """Training cells time forward plus backward; the conv path is skipped"""
        cfg = BenchConfig(neuron_kinds=["masked_psn", "spsn", "spsn_conv"], n_values=[4], t_values=[4],
                          warmup_iters=0, measured_iters=3)
        status = {r.neuron_kind: r.status for r in bench_training(cfg)}
        assert status == {"masked_psn": "ok", "spsn": "ok", "spsn_conv": "skipped"}

    def test_every_kind_runs(self):
        """All benchmark kinds produce a time in inference"""
        cfg = BenchConfig(neuron_kinds=["if", "lif_parallel", "psn", "masked_psn", "spsn", "spsn_conv"],
                          n_values=[3], t_values=[5], warmup_iters=1, measured_iters=3)
        assert all(r.status == "ok" for r in bench_forward(cfg))

    def test_unknown_kind(self):
        """Unknown neuron kinds are rejected"""
        with pytest.raises(ValidationError):
            BenchConfig(neuron_kinds=["gru"])

    def test_at_least_three_iterations(self):
        """Fewer than three measured iterations are rejected"""
        with pytest.raises(ValidationError):
            BenchConfig(measured_iters=2)

    def test_inputs_are_shared(self):
        """The same (seed, N, T) gives the same input for every kind"""
        assert np.array_equal(bench_input(0, 8, 4), bench_input(0, 8, 4))
        assert bench_input(0, 8, 4).shape == (4, 8)

    def test_order(self):
        """Masked and sliding cells use k = T // 2, at least 1"""
        assert [bench_order(T) for T in (1, 2, 8)] == [1, 1, 4]

    @pytest.mark.slow
    def test_psn_faster_than_lif_at_scale(self):
        """At N=2^16, T=32 a PSN training step beats the serial LIF"""
        cfg = BenchConfig(neuron_kinds=["psn"], n_values=[2 ** 16], t_values=[32], warmup_iters=1)
        assert bench_training(cfg)[0].ratio_vs_baseline > 1.0

    @pytest.mark.slow
    def test_speedup_grows_with_time_steps(self):
        """At N=2^16 the PSN training speedup at T=64 is at least the one at T=2"""
        cfg = BenchConfig(neuron_kinds=["psn"], n_values=[2 ** 16], t_values=[2, 64], warmup_iters=1)
        ratios = {r.T: r.ratio_vs_baseline for r in bench_training(cfg) if r.neuron_kind == "psn"}
        assert ratios[64] >= ratios[2]


class TestReports:
    """CSV and text output"""

    def test_csv_columns_and_round_trip(self, tmp_path, small_grid):
        """The header lists the fixed columns and rows read back as equal records"""
        records = bench_forward(small_grid.model_copy(update={"skip_large": True, "large_n": 8}))
        path = write_csv(tmp_path / "bench.csv", records)
        assert path.read_text().splitlines()[0] == ",".join(CSV_COLUMNS)
        assert read_csv(path) == records

    def test_grid_table(self, small_grid):
        """One block per kind with the ratio or 'skipped' in each cell"""
        text = format_grid(bench_forward(small_grid.model_copy(update={"skip_large": True, "large_n": 8})))
        assert "lif (inference) t_lif / t_lif" in text
        assert "psn (inference) t_lif / t_psn" in text
        assert "skipped" in text and "1.00" in text


class TestMemory:
    """Tracked memory of one training step"""

    def test_model_layout(self):
        """Three synapse layers with neuron layers only between them"""
        kinds = [layer.kind for layer in memory_model("psn", 4, 8, 3).layers]
        assert kinds == ["linear", "neuron", "linear", "neuron", "linear"]
        assert [layer.kind for layer in memory_model("no_neuron", 4, 8, 3).layers] == ["linear"] * 3

    def test_serial_neurons_cost_more(self):
        """IF neurons add more tracked memory than PSN layers"""
        report = bench_memory(T=8, N=16, batch=4)
        assert report.delta_psn > 0
        assert report.delta_if > report.delta_psn
        assert report.ratio > 1.0
        assert report.gap_per_neuron == (report.delta_if - report.delta_psn) / (8 * 16)

    def test_ratio_band(self):
        """At T=16 the IF/PSN memory ratio lies in [1.5, 2.5]"""
        report = bench_memory(T=16, N=32, batch=16)
        assert 1.5 <= report.ratio <= 2.5

    def test_table(self):
        """The table has a header and one row per report"""
        text = format_memory_table([bench_memory(T=4, N=8, batch=2)])
        lines = text.splitlines()
        assert len(lines) == 2 and "M_PSN" in lines[0]
