import math

import numpy as np
import pytest
from pydantic import ValidationError

from psn.data import SequenceBatch, SequenceMetadata, synth_toy_dataset
from psn.errors import DivergenceError
from psn.models import (LayerSpec, LossKind, ModelSpec, NeuronKind, NeuronSpec, OptimizerKind, TrainConfig)
from psn.network import Network
from psn.tensor import Tape, Tensor, parameter, reduce_sum
from psn.training import (AdamW, SGDMomentum, clip_grad_norm, evaluate, learning_rate_at, loss_ce_mean,
                          loss_tet, metric_series, read_history, train, write_history)


@pytest.fixture
def toy():
    return synth_toy_dataset(num_classes=3, samples_per_class=8, seed=0, test_samples_per_class=4)


def small_model(kind: str = "psn", **neuron) -> ModelSpec:
    return ModelSpec.classifier(NeuronSpec(kind=NeuronKind(kind), **neuron), time_steps=16, in_features=16,
                                hidden=8, num_classes=3, seed=1)


class TestLosses:
    """Sequence classification losses"""

    def test_uniform_logits(self):
        """Zero logits over two classes cost ln 2"""
        loss = loss_ce_mean(Tensor(np.zeros((4, 3, 2))), np.array([0, 1, 0]))
        assert float(loss.data) == pytest.approx(math.log(2), rel=1e-6)

    def test_tet_single_step_is_ce(self):
        """With T=1 the per-step loss equals the mean-logit loss"""
        logits = Tensor(np.random.default_rng(0).standard_normal((1, 5, 3)))
        labels = np.array([0, 1, 2, 1, 0])
        assert float(loss_tet(logits, labels).data) == pytest.approx(float(loss_ce_mean(logits, labels).data),
                                                                      rel=1e-6)

    def test_tet_constant_over_time(self):
        """Logits repeated over time give the same loss under both kinds"""
        step = np.random.default_rng(1).standard_normal((4, 3))
        logits = Tensor(np.repeat(step[None], 6, axis=0))
        labels = np.array([2, 0, 1, 1])
        assert float(loss_tet(logits, labels).data) == pytest.approx(float(loss_ce_mean(logits, labels).data),
                                                                      rel=1e-5)

    def test_label_smoothing_raises_confident_loss(self):
        """Smoothing penalises a confident correct prediction"""
        logits = Tensor(np.array([[[10.0, -10.0]]]))
        labels = np.array([0])
        assert float(loss_ce_mean(logits, labels, 0.1).data) > float(loss_ce_mean(logits, labels).data)


class TestOptimizers:
    """Parameter updates"""

    def test_sgd_step(self):
        """Plain SGD moves against the gradient"""
        p = parameter([1.0, 2.0])
        p.grad = np.array([0.5, -1.0], dtype=np.float32)
        SGDMomentum([p], momentum=0.0).step(0.1)
        assert np.allclose(p.data, [0.95, 2.1])

    def test_momentum_accumulates(self):
        """A repeated gradient builds up velocity"""
        p = parameter([0.0])
        optimizer = SGDMomentum([p], momentum=0.5)
        for _ in range(2):
            p.grad = np.array([1.0], dtype=np.float32)
            optimizer.step(1.0)
        assert p.data.tolist() == [-2.5]

    def test_adam_first_step_is_lr_sized(self):
        """Adam's bias-corrected first step has magnitude lr per coordinate"""
        p = parameter([1.0, 1.0])
        p.grad = np.array([3.0, -0.01], dtype=np.float32)
        AdamW([p]).step(0.01)
        assert np.allclose(p.data, [0.99, 1.01], atol=1e-5)

    def test_clip_grad_norm(self):
        """Gradients are rescaled to the maximum norm"""
        p = parameter([0.0, 0.0])
        p.grad = np.array([3.0, 4.0], dtype=np.float32)
        assert clip_grad_norm([p], 1.0) == pytest.approx(5.0)
        assert np.allclose(p.grad, [0.6, 0.8])

    def test_schedules(self):
        """Cosine starts at the base rate and halves midway; step decays by gamma"""
        cosine = TrainConfig(epochs=10, learning_rate=0.1)
        assert learning_rate_at(0, cosine) == pytest.approx(0.1)
        assert learning_rate_at(5, cosine) == pytest.approx(0.05)
        stepped = TrainConfig(epochs=10, learning_rate=0.1, lr_schedule="step", step_size=3, gamma=0.5)
        assert learning_rate_at(7, stepped) == pytest.approx(0.025)


class TestTrain:
    """Backpropagation-through-time training loop"""

    def test_zero_learning_rate_keeps_parameters(self, toy):
        """lr=0 leaves every parameter bit-identical after training"""
        spec = small_model("psn")
        before = {name: t.data.copy() for name, t in Network(spec).named_parameters().items()}
        result = train(spec, toy, TrainConfig(epochs=2, batch_size=8, learning_rate=0.0))
        after = result.network.named_parameters()
        assert all(np.array_equal(before[name], after[name].data) for name in before)

    def test_deterministic(self, toy):
        """Same seeds and one thread give identical histories"""
        cfg = TrainConfig(epochs=2, batch_size=8, learning_rate=0.05)
        first = train(small_model("psn"), toy, cfg).history
        second = train(small_model("psn"), toy, cfg).history
        assert first == second

    def test_history_layout(self, toy):
        """Each epoch records loss, accuracy and firing rates per split plus the learning rate"""
        result = train(small_model("lif"), toy, TrainConfig(epochs=1, batch_size=8))
        keys = {(r.split, r.metric) for r in result.history}
        assert keys == {("train", "loss"), ("train", "accuracy"), ("train", "firing_rate/0"),
                        ("test", "loss"), ("test", "accuracy"), ("test", "firing_rate/0"), ("train", "lr")}
        assert all(0.0 <= r.value <= 1.0 for r in result.history if r.metric.startswith("firing_rate"))

    def test_lambda_reaches_one(self, toy):
        """Progressive masking drives lambda to exactly 1 before the last epoch"""
        result = train(small_model("masked-psn", order=4), toy, TrainConfig(epochs=3, batch_size=12))
        assert metric_series(result.history, "lambda") == [0.0, 1.0, 1.0]
        assert result.network.current_lambda() == 1.0

    def test_lambda_schedule_disabled(self, toy):
        """Without the schedule lambda stays at its initial value"""
        cfg = TrainConfig(epochs=2, batch_size=12, lambda_schedule_enabled=False)
        result = train(small_model("masked-psn", order=4, lambda_init=0.5), toy, cfg)
        assert metric_series(result.history, "lambda") == [0.5, 0.5]

    @pytest.mark.parametrize("kind", ["if", "lif-no-reset", "spsn"])
    def test_other_neurons_train(self, toy, kind):
        """Every neuron kind runs through the loop with TET loss and Adam"""
        cfg = TrainConfig(epochs=1, batch_size=12, loss_kind=LossKind.TET,
                          optimizer_kind=OptimizerKind.ADAM_LIKE, learning_rate=1e-3, grad_clip=1.0)
        result = train(small_model(kind, order=3), toy, cfg)
        assert np.isfinite(metric_series(result.history, "loss")).all()

    def test_divergence_is_reported(self):
        """A NaN in the data stops training with the offending tensor named"""
        inputs = np.zeros((2, 4, 3), dtype=np.float32)
        inputs[1, 2, 0] = np.nan
        metadata = SequenceMetadata(source="nan", num_classes=2)
        data = SequenceBatch(inputs=Tensor(inputs), labels=np.array([0, 1, 0, 1]), metadata=metadata)
        spec = ModelSpec(time_steps=2, layers=[LayerSpec(kind="linear", in_features=3, out_features=2)])
        with pytest.raises(DivergenceError) as excinfo:
            train(spec, (data, data), TrainConfig(epochs=1, batch_size=4))
        assert excinfo.value.tensor_name

    def test_evaluate(self, toy):
        """Accuracy lies in [0, 1] with one firing rate per neuron layer"""
        result = train(small_model("psn"), toy, TrainConfig(epochs=1, batch_size=8))
        accuracy, rates = evaluate(result.network, toy[1])
        assert 0.0 <= accuracy <= 1.0 and len(rates) == 1


@pytest.fixture(scope="module")
def temporal_task():
    """4 classes, 2000 train / 500 test sequences of 16 steps"""
    return synth_toy_dataset(num_classes=4, samples_per_class=500, seed=0, test_samples_per_class=125)


@pytest.fixture(scope="module")
def trained_on_task(temporal_task):
    """50-epoch runs with the command-line defaults, trained once per neuron setup"""
    results = {}

    def run(kind: str, order=None):
        key = (kind, order)
        if key not in results:
            spec = ModelSpec.classifier(NeuronSpec(kind=NeuronKind(kind), order=order), time_steps=16,
                                        in_features=16, hidden=64, num_classes=4)
            results[key] = train(spec, temporal_task, TrainConfig())
        return results[key]

    return run


@pytest.mark.slow
class TestTemporalTask:
    """Full-size runs on the gap-counting task"""

    def test_psn_beats_lif(self, temporal_task, trained_on_task):
        """PSN test accuracy exceeds LIF and both beat chance by at least 20 points"""
        psn, _ = evaluate(trained_on_task("psn").network, temporal_task[1])
        lif, _ = evaluate(trained_on_task("lif").network, temporal_task[1])
        assert psn > lif
        assert lif >= 0.25 + 0.20

    def test_lambda_reaches_one_by_epoch_seven(self, trained_on_task):
        """The masked PSN is fully masked from epoch 7 of 50 on"""
        lambdas = metric_series(trained_on_task("masked-psn").history, "lambda")
        assert len(lambdas) == 50
        assert lambdas[6] < 1.0
        assert all(value == 1.0 for value in lambdas[7:])

    @pytest.mark.parametrize("kind", ["psn", "lif", "masked-psn"])
    def test_firing_rates_in_band(self, temporal_task, trained_on_task, kind):
        """Every neuron layer fires, but never uninterruptedly"""
        _, rates = evaluate(trained_on_task(kind).network, temporal_task[1])
        assert rates and all(0.0 < rate < 0.99 for rate in rates)

    @pytest.mark.parametrize("kind", [kind.value for kind in NeuronKind])
    def test_loss_decreases_early(self, trained_on_task, kind):
        """The 3-epoch moving average of the train loss falls over the first 10 epochs"""
        losses = metric_series(trained_on_task(kind).history, "loss")[:10]
        assert np.mean(losses[7:10]) < np.mean(losses[0:3])

    def test_memoryless_sliding_psn_caps_below_psn(self, temporal_task, trained_on_task):
        """A k=1 sliding PSN cannot count the gap and stays below the full-order PSN"""
        psn, _ = evaluate(trained_on_task("psn").network, temporal_task[1])
        memoryless, _ = evaluate(trained_on_task("spsn", order=1).network, temporal_task[1])
        assert memoryless < psn


class TestHistoryFiles:
    """JSON-lines history files"""

    def test_round_trip(self, tmp_path, toy):
        """Written records read back equal"""
        history = train(small_model("psn"), toy, TrainConfig(epochs=1, batch_size=8)).history
        path = write_history(tmp_path / "history.jsonl", history)
        assert read_history(path) == history
        assert len(path.read_text().splitlines()) == len(history)

    def test_malformed_line(self, tmp_path):
        """A line that is not a history record is rejected"""
        path = tmp_path / "history.jsonl"
        path.write_text('{"epoch": 0, "split": "train", "metric": "loss", "value": 1.0}\n\n{"epoch": "x"\n')
        with pytest.raises(ValidationError):
            read_history(path)


def test_backward_reaches_network_parameters(toy):
    """One backward pass through the PSN classifier gives every parameter a gradient"""
    network = Network(small_model("psn"))
    batch = toy[0].subset(np.arange(4))
    with Tape() as tape:
        logits, _ = network(batch.inputs)
        loss = reduce_sum(logits)
    tape.backward(loss)
    assert all(p.grad is not None for p in network.parameters())
