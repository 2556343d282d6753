import csv
import io
import json
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

from sknet.core.errors import ConfigError, TrainingDiverged
from sknet.core.tensor import Parameter
from sknet.ingestion.cifar import ImageSet
from sknet.ingestion.synthetic import SyntheticScaleSpec, synthetic_set
from sknet.models.arch import build, load_spec
from sknet.services.gradcheck import toy_spec
from sknet.services.training import (
    OptimConfig,
    TrainLog,
    cifar_recipe,
    evaluate,
    imagenet_recipe,
    lightweight_recipe,
    lr_at,
    sgd_step,
    top1_error,
    train,
)

TINY_CIFAR = Path(__file__).resolve().parent.parent / "configs" / "sknet29-cifar-tiny.json"


def _shapes(n, canvas=16, seed=0):
    data, _ = synthetic_set(SyntheticScaleSpec(canvas=canvas, seed=seed), n)
    return data


class TestSchedule:
    def test_imagenet_steps(self):
        cfg = imagenet_recipe()
        assert lr_at(cfg, 0) == 0.1
        assert lr_at(cfg, 29) == 0.1
        assert lr_at(cfg, 30) == pytest.approx(0.01)
        assert lr_at(cfg, 95) == pytest.approx(1e-4)
        assert cfg.label_smoothing == 0.1

    def test_lightweight_decay(self):
        assert lightweight_recipe().weight_decay == 4e-5

    def test_cifar_fractions(self):
        cfg = cifar_recipe(10)
        assert lr_at(cfg, 0) == 0.1
        assert lr_at(cfg, 149) == 0.1
        assert lr_at(cfg, 150) == pytest.approx(0.01)
        assert lr_at(cfg, 225) == pytest.approx(0.001)
        assert cifar_recipe(100).lr0 == 0.05

    def test_schedule_never_increases(self):
        cfg = imagenet_recipe()
        rates = [lr_at(cfg, e) for e in range(cfg.epochs)]
        assert all(b <= a for a, b in zip(rates, rates[1:]))

    def test_increasing_multiplier_rejected(self):
        with pytest.raises(ValidationError):
            OptimConfig(schedule=((10, 0.1), (20, 0.5)))

    def test_descending_boundaries_rejected(self):
        with pytest.raises(ValidationError):
            OptimConfig(schedule=((20, 0.1), (10, 0.01)))

    def test_negative_rate_rejected(self):
        with pytest.raises(ValidationError):
            OptimConfig(lr0=-0.1)


class TestSGD:
    def test_momentum_accumulates(self):
        cfg = OptimConfig(weight_decay=0.0)
        p = Parameter(np.zeros(2))
        g = np.array([1.0, -2.0])
        state = {}
        sgd_step({"p": p}, {"p": g}, state, cfg, lr=1.0)
        np.testing.assert_array_equal(state["p"], g)
        sgd_step({"p": p}, {"p": g}, state, cfg, lr=1.0)
        np.testing.assert_allclose(state["p"], 1.9 * g)
        np.testing.assert_allclose(p.data, -2.9 * g)

    def test_weight_decay_skips_flagged_parameters(self):
        cfg = OptimConfig(weight_decay=0.5)
        decayed, bias = Parameter(np.ones(1)), Parameter(np.ones(1), decay=False)
        zero = {"w": np.zeros(1), "b": np.zeros(1)}
        sgd_step({"w": decayed, "b": bias}, zero, {}, cfg, lr=0.1)
        assert decayed.data[0] == pytest.approx(0.95)
        assert bias.data[0] == 1.0


class TestMetrics:
    def test_top1_error(self):
        logits = np.array([[0.1, 0.9], [0.8, 0.2], [0.3, 0.7]])
        assert top1_error(logits, np.array([1, 1, 1])) == pytest.approx(1 / 3)

    def test_constant_logits_pick_class_zero(self):
        assert top1_error(np.zeros((10, 10)), np.arange(10)) == pytest.approx(0.9)

    def test_random_net_is_at_chance(self):
        rng = np.random.default_rng(8)
        data = ImageSet(rng.uniform(size=(400, 3, 8, 8)), rng.integers(0, 4, 400), 4)
        err = evaluate(build(toy_spec(), seed=2), data, batch_size=100)
        assert err == pytest.approx(0.75, abs=0.1)


class TestTrain:
    def _cfg(self, **kwargs):
        base = dict(lr0=0.05, momentum=0.9, weight_decay=0.0, batch_size=4, epochs=2)
        return OptimConfig(**{**base, **kwargs})

    def test_zero_rate_freezes_parameters(self):
        net = build(toy_spec(), seed=1)
        before = {k: p.data.copy() for k, p in net.parameters().items()}
        train(net, _shapes(8), self._cfg(lr0=0.0, weight_decay=1e-4, epochs=1))
        for name, param in net.parameters().items():
            np.testing.assert_array_equal(param.data, before[name], err_msg=name)

    def test_deterministic_log(self):
        cfg = self._cfg(augment="cifar_standard")
        logs = [train(build(toy_spec(), seed=1), _shapes(8), cfg).to_csv() for _ in range(2)]
        assert logs[0] == logs[1]

    def test_log_contents(self, tmp_path):
        log = train(build(toy_spec(), seed=1), _shapes(8), self._cfg(), eval_data=_shapes(4, seed=1), record_steps=True)
        assert [r.epoch for r in log.epochs] == [0, 1]
        assert len(log.steps) == 4
        assert all(0.0 <= r.eval_top1 <= 1.0 for r in log.epochs)
        rows = list(csv.DictReader(io.StringIO(log.to_csv())))
        assert float(rows[1]["train_loss"]) == log.epochs[1].train_loss
        data = json.loads(log.write(tmp_path / "log.json").read_text())
        assert data["arch"] == log.arch and len(data["steps"]) == 4
        assert log.write(tmp_path / "log.csv").read_text().startswith("epoch,lr,")

    def test_accumulation_runs_every_batch(self):
        log = train(build(toy_spec(), seed=1), _shapes(12), self._cfg(accumulate=2, epochs=1), record_steps=True)
        assert len(log.steps) == 3

    def test_nan_input_diverges(self):
        data = _shapes(4)
        data.pixels[0, 0, 0, 0] = np.nan
        with pytest.raises(TrainingDiverged):
            train(build(toy_spec(), seed=1), data, self._cfg(epochs=1))

    def test_empty_data_rejected(self):
        empty = ImageSet(np.zeros((0, 3, 16, 16)), np.zeros(0, dtype=np.int64), 4)
        with pytest.raises(ConfigError, match="empty"):
            train(build(toy_spec(), seed=1), empty, self._cfg(epochs=1))
        with pytest.raises(ConfigError):
            evaluate(build(toy_spec(), seed=1), empty)

    def test_empty_log_csv(self):
        assert TrainLog("x").to_csv() == "epoch,lr,train_loss,train_top1,eval_top1\n"


@pytest.mark.slow
def test_tiny_sknet29_overfits_a_fixed_batch():
    data = _shapes(64, canvas=32)
    net = build(load_spec(TINY_CIFAR).with_classes(data.num_classes), seed=7)
    cfg = OptimConfig(lr0=0.05, momentum=0.9, weight_decay=0.0, batch_size=64, epochs=200)
    steps = train(net, data, cfg, record_steps=True).steps
    assert len(steps) == 200
    assert steps[-1] < 0.05
    # no rebound after warm-up beyond 5% of the starting loss
    tol = 0.05 * steps[0]
    for i in range(21, len(steps)):
        assert steps[i] <= min(steps[20:i]) + tol, i
