from __future__ import annotations

import numpy as np
import pytest

from heatseg import *

SMALL = NetworkConfig(patch_size=(16, 16), stages=3, pooling=(2, 2), base_channels=4, num_classes=3)


def images_and_labels(rng: np.random.Generator, config: NetworkConfig, batch: int = 2):
    images = rng.uniform(size=(batch, 1, *config.patch_size))
    labels = rng.integers(0, config.num_classes, size=(batch, *config.patch_size))
    return images, labels


class TestConfig:
    @pytest.mark.parametrize(
        "changes",
        [
            {"stages": 2},
            {"pooling": (3, 3)},
            {"pooling": (2,)},
            {"patch_size": (18, 16)},
            {"patch_size": (16,), "pooling": (2,)},
            {"num_classes": 1},
            {"variant": "transformer"},
            {"hco_placement": "decoder"},
            {"base_channels": 0},
        ],
    )
    def test_invalid(self, changes):
        with pytest.raises(ConfigError):
            NetworkConfig.from_dict({**SMALL.to_dict(), **changes})

    def test_unknown_field(self):
        with pytest.raises(ConfigError):
            NetworkConfig.from_dict({**SMALL.to_dict(), "dropout": 0.1})

    def test_strides_and_shapes(self):
        config = NetworkConfig(patch_size=(8, 32), stages=4, pooling=(1, 3))
        assert config.stride(0) == (1, 1)
        assert config.stride(1) == (2, 2)
        assert config.stride(2) == (1, 2)
        assert [config.stage_shape(s) for s in range(4)] == [(8, 32), (4, 16), (4, 8), (4, 4)]
        assert [config.stage_channels(s) for s in range(4)] == [8, 16, 32, 64]

    def test_json_round_trip(self, tmp_path):
        SMALL.to_json(tmp_path / "config.json")
        assert NetworkConfig.from_json(tmp_path / "config.json") == SMALL

    def test_invalid_json(self, tmp_path):
        (tmp_path / "bad.json").write_text("{")
        with pytest.raises(ConfigError):
            NetworkConfig.from_json(tmp_path / "bad.json")

    @pytest.mark.parametrize("name", ["2d-small", "presets/2d-small.json", "2d-small.json"])
    def test_presets(self, name):
        config = load_preset(name)
        assert config.patch_size == (64, 64)
        assert config.variant == "umh"

    def test_3d_preset(self):
        assert load_preset("3d-small").spatial_rank == 3

    def test_missing_preset(self):
        with pytest.raises(ConfigError):
            load_preset("nope")

    def test_full_scale_presets(self):
        ct = FULL_SCALE_PRESETS["abdomen-ct-3d"]
        assert ct.patch_size == (40, 224, 192) and ct.stages == 6 and ct.pooling == (3, 5, 5)
        mr2d = FULL_SCALE_PRESETS["abdomen-mr-2d"]
        assert mr2d.patch_size == (320, 320) and mr2d.stages == 7 and mr2d.batch_size == 30
        assert all(c.num_classes == 14 for c in FULL_SCALE_PRESETS.values())


class TestBuild:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_output_is_distribution(self, rng, variant):
        config = SMALL.with_variant(variant)
        network = build(config)
        images, _ = images_and_labels(rng, config)
        out = network.predict(images)
        assert out.probabilities.shape == (2, 3, 16, 16)
        np.testing.assert_allclose(out.probabilities.sum(axis=1), 1.0)
        assert out.labels().shape == (2, 16, 16)

    @pytest.mark.parametrize(
        "variant, ssm_stages, hco_names",
        [
            ("baseline", [], []),
            ("mamba_enc", [0, 1], []),
            ("mamba_bot", [2], []),
            ("hco_bot", [], ["hco.0", "hco.1"]),
            ("hco_enc", [], ["hco.0", "hco.1"]),
            ("umh", [0, 1], ["hco.0", "hco.1"]),
        ],
    )
    def test_layout(self, variant, ssm_stages, hco_names):
        network = build(SMALL.with_variant(variant))
        names = network.named_parameters()
        assert sorted({n.split(".")[1] for n in names if n.startswith("ssm.")}) == [str(s) for s in ssm_stages]
        assert sorted({".".join(n.split(".")[:2]) for n in names if n.startswith("hco.")}) == hco_names
        assert len(network.ssm_blocks) == len(ssm_stages)
        assert len(network.hco_layers) == len(hco_names)

    def test_deeper_network_layout(self):
        network = build(NetworkConfig(patch_size=(16, 16), stages=4, pooling=(3, 3), base_channels=2))
        assert len(network.hco_layers) == 2
        assert len(network.ssm_blocks) == 3

    def test_hco_parameters_account_for_the_difference(self):
        baseline = build(SMALL.with_variant("baseline"))
        hco_bot = build(SMALL.with_variant("hco_bot"))
        hco_params = sum(layer.parameter_count() for layer in hco_bot.hco_layers)
        assert hco_bot.parameter_count() - baseline.parameter_count() == hco_params
        e = SMALL.embed_dim
        assert hco_params == (8 * 8 + 4 * 4) * e + 2 * (e + 1)

    def test_hco_grids(self):
        network = build(SMALL)
        assert network.skip_hco is not None and network.skip_hco.grid_shape == (8, 8)
        assert network.bottleneck_hco is not None and network.bottleneck_hco.grid_shape == (4, 4)

    def test_serial_placement(self):
        network = build(NetworkConfig.from_dict({**SMALL.to_dict(), "hco_placement": "serial"}))
        assert network.skip_hco is None and network.bottleneck_hco is None
        assert [layer.grid_shape for layer in network.serial_hcos] == [(4, 4), (4, 4)]

    def test_same_seed_same_parameters(self):
        first, second = build(SMALL, seed=3), build(SMALL, seed=3)
        for a, b in zip(first.parameters(), second.parameters()):
            assert a.name == b.name
            np.testing.assert_array_equal(a.value, b.value)

    def test_input_shape_checked(self, rng):
        with pytest.raises(ContractError):
            build(SMALL)(rng.uniform(size=(1, 1, 16, 8)))

    def test_3d(self, rng):
        config = NetworkConfig(patch_size=(8, 16, 16), stages=3, pooling=(1, 2, 2), base_channels=2, num_classes=2)
        out = build(config).predict(rng.uniform(size=(1, 1, 8, 16, 16)))
        assert out.probabilities.shape == (1, 2, 8, 16, 16)

    @pytest.mark.parametrize("variant", ABLATION_VARIANTS)
    def test_every_parameter_gets_a_gradient(self, rng, variant):
        config = SMALL.with_variant(variant)
        network = build(config)
        images, labels = images_and_labels(rng, config)
        backward(segmentation_loss(network(images), labels))
        for p in network.parameters():
            assert np.linalg.norm(p.grad) > 0, p.name


class TestLoss:
    def test_perfect_prediction(self):
        labels = np.array([[[0, 1], [2, 1]]])
        probabilities = np.moveaxis(np.eye(3)[labels], -1, 1)
        loss = segmentation_loss(SegmentationOutput(probabilities), labels)
        assert float(loss.value) == pytest.approx(0.0, abs=1e-6)

    def test_uniform_prediction_is_worse(self):
        labels = np.array([[[0, 1], [2, 1]]])
        uniform = SegmentationOutput(np.full((1, 3, 2, 2), 1.0 / 3.0))
        assert float(segmentation_loss(uniform, labels).value) > np.log(3.0)

    def test_uniform_two_class_cross_entropy_is_ln2(self, rng):
        labels = rng.integers(0, 2, size=(1, 8, 8))
        uniform = SegmentationOutput(np.full((1, 2, 8, 8), 0.5))
        counts = np.array([np.sum(labels == c) for c in range(2)])
        dice = (2.0 * 0.5 * counts + DICE_SMOOTH) / (0.5 * 64 + counts + DICE_SMOOTH)
        loss = float(segmentation_loss(uniform, labels).value)
        assert loss - (1.0 - dice.mean()) == pytest.approx(np.log(2.0), abs=1e-12)

    def test_matches_straight_line_computation(self, rng):
        labels = rng.integers(0, 2, size=(3, 8, 8))
        logits = rng.standard_normal((3, 2, 8, 8))
        probabilities = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)

        dice = []
        cross_entropy = []
        for b in range(3):
            for c in range(2):
                p, t = probabilities[b, c], (labels[b] == c).astype(float)
                dice.append((2.0 * np.sum(p * t) + 1e-5) / (np.sum(p) + np.sum(t) + 1e-5))
            for i in range(8):
                for j in range(8):
                    cross_entropy.append(-np.log(probabilities[b, labels[b, i, j], i, j]))
        expected = (1.0 - np.mean(dice)) + np.mean(cross_entropy)

        loss = segmentation_loss(SegmentationOutput(probabilities), labels)
        assert float(loss.value) == pytest.approx(expected, abs=1e-10)

    def test_label_range(self):
        with pytest.raises(LabelRangeError):
            segmentation_loss(SegmentationOutput(np.full((1, 2, 2, 2), 0.5)), np.full((1, 2, 2), 2))

    def test_target_shape(self):
        with pytest.raises(ContractError):
            segmentation_loss(SegmentationOutput(np.full((1, 2, 2, 2), 0.5)), np.zeros((1, 3, 2)))

    def test_one_hot(self):
        np.testing.assert_array_equal(one_hot(np.array([[0, 2]]), 3), [[[1, 0], [0, 0], [0, 1]]])

    def test_output_validates(self):
        with pytest.raises(ContractError):
            SegmentationOutput(np.full((1, 2, 2, 2), 0.7))
