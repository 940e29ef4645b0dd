from __future__ import annotations

import numpy as np
import pytest

from heatseg import *

TINY = NetworkConfig(patch_size=(16, 16), stages=3, pooling=(2, 2), base_channels=4, num_classes=2)


@pytest.fixture(scope="module")
def cases():
    return generate_phantoms(4, TINY.patch_size, TINY.num_classes, seed=7)


class TestOptimizerConfig:
    def test_unknown(self):
        with pytest.raises(ConfigError):
            OptimizerConfig(name="lbfgs")

    @pytest.mark.parametrize("changes", [{"lr": -1.0}, {"weight_decay": -0.1}, {"batch_size": 0}])
    def test_invalid(self, changes):
        with pytest.raises(ConfigError):
            OptimizerConfig(**changes)


def test_needs_cases():
    with pytest.raises(ConfigError):
        train(build(TINY), [], OptimizerConfig(), epochs=1)


def test_deterministic(cases):
    first = train(build(TINY, seed=1), cases, OptimizerConfig(batch_size=2), epochs=2, seed=4)
    second = train(build(TINY, seed=1), cases, OptimizerConfig(batch_size=2), epochs=2, seed=4)
    assert first.losses == second.losses
    for name, value in first.params.items():
        np.testing.assert_array_equal(value, second.params[name])


def test_zero_learning_rate_keeps_loss_constant(cases):
    report = train(build(TINY), cases, OptimizerConfig(lr=0.0), epochs=3)
    assert report.losses == pytest.approx([report.losses[0]] * 3, rel=1e-12)


@pytest.fixture(scope="module")
def default_phantoms():
    """The phantom set the command line trains on when no dataset is given."""
    config = load_preset("2d-small")
    return config, generate_phantoms(20, config.patch_size, config.num_classes, seed=7)


def train_default(config: NetworkConfig, cases, epochs: int) -> TrainingReport:
    return train(build(config), cases, OptimizerConfig(lr=3e-3, batch_size=config.batch_size), epochs)


@pytest.mark.slow
@pytest.mark.parametrize("variant", ABLATION_VARIANTS)
def test_loss_strictly_decreases_over_first_epochs(default_phantoms, variant):
    config, cases = default_phantoms
    losses = train_default(config.with_variant(variant), cases, epochs=5).losses
    assert all(later < earlier for earlier, later in zip(losses, losses[1:])), losses


@pytest.mark.slow
def test_default_network_learns_phantoms(default_phantoms):
    config, cases = default_phantoms
    assert config.variant == "umh"
    report = train_default(config, cases, epochs=30)
    assert report.train_dsc[-1] >= 0.90


@pytest.mark.parametrize("name", ["adam", "adamw", "sgd"])
def test_optimizers_lower_the_loss(cases, name):
    optimizer = OptimizerConfig(name=name, lr=1e-2 if name != "sgd" else 0.1, weight_decay=1e-4)
    report = train(build(TINY), cases, optimizer, epochs=3)
    assert report.losses[-1] < report.losses[0]


def test_divergence_is_reported(cases):
    network = build(TINY)
    network.head.bias.value[:] = np.nan
    with pytest.raises(TrainingDivergedError) as excinfo:
        train(network, cases, OptimizerConfig(), epochs=1)
    assert excinfo.value.step == 0


def test_epoch_callback_and_report(cases, tmp_path):
    seen = []
    report = train(build(TINY), cases, OptimizerConfig(), epochs=2, on_epoch=lambda *args: seen.append(args))
    assert [epoch for epoch, _, _ in seen] == [1, 2]
    assert len(report.losses) == len(report.train_dsc) == 2
    assert all(0.0 <= d <= 1.0 for d in report.train_dsc)
    report.to_csv(tmp_path / "training.csv")
    loaded = TrainingReport.read_csv(tmp_path / "training.csv")
    assert loaded.losses == report.losses
    assert loaded.train_dsc == report.train_dsc


def test_checkpoint_restores_network(cases, tmp_path):
    network = build(TINY.with_variant("hco_bot"))
    train(network, cases, OptimizerConfig(), epochs=1, checkpoint=tmp_path / "model.zip")
    restored = load_network(tmp_path / "model.zip")
    assert restored.config == network.config
    images, _ = stack_cases(cases)
    np.testing.assert_array_equal(restored.predict(images).probabilities, network.predict(images).probabilities)
