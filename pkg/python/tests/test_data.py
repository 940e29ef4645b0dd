from __future__ import annotations

import json

import numpy as np
import pytest

from heatseg import *


class TestGenerate:
    def test_deterministic(self):
        a, b = generate_phantom((32, 32), 3, seed=5), generate_phantom((32, 32), 3, seed=5)
        np.testing.assert_array_equal(a.image.data, b.image.data)
        np.testing.assert_array_equal(a.labels, b.labels)
        assert a.ellipses == b.ellipses

    def test_seeds_differ(self):
        a, b = generate_phantom((32, 32), 3, seed=5), generate_phantom((32, 32), 3, seed=6)
        assert not np.array_equal(a.labels, b.labels)

    @pytest.mark.parametrize("shape, classes", [((64, 64), 3), ((16, 32, 32), 4), ((8, 8), 2)])
    def test_every_class_present(self, shape, classes):
        phantom = generate_phantom(shape, classes, seed=11)
        assert phantom.shape == shape
        assert phantom.image.shape == (1, *shape)
        assert set(np.unique(phantom.labels)) == set(range(classes))
        assert phantom.image.data.min() >= 0.0 and phantom.image.data.max() <= 1.0

    def test_foreground_is_brighter_than_background(self):
        phantom = generate_phantom((64, 64), 2, seed=7)
        image = phantom.image.data[0]
        assert image[phantom.labels == 1].mean() - image[phantom.labels == 0].mean() >= 0.2

    def test_intensity_bands(self):
        assert class_intensity(1, 3) == pytest.approx(0.45)
        assert class_intensity(2, 3) == pytest.approx(0.9)
        assert class_intensity(1, 2) == pytest.approx(0.45)

    @pytest.mark.parametrize(
        "shape, classes", [((64,), 3), ((4, 64), 3), ((64, 64), 1), ((2, 2, 2, 2), 3)]
    )
    def test_invalid(self, shape, classes):
        with pytest.raises(GenerationError):
            generate_phantom(shape, classes, seed=0)

    def test_many(self):
        phantoms = generate_phantoms(5, (16, 16), 3, seed=7)
        assert len({p.seed for p in phantoms}) == 5
        again = generate_phantoms(5, (16, 16), 3, seed=7)
        assert [p.seed for p in phantoms] == [p.seed for p in again]


@pytest.mark.parametrize("text, shape", [("64x64", (64, 64)), ("16X32x32", (16, 32, 32))])
def test_parse_shape(text, shape):
    assert parse_shape(text) == shape


def test_parse_shape_invalid():
    with pytest.raises(GenerationError):
        parse_shape("64 by 64")


class TestDataset:
    def test_round_trip(self, tmp_path):
        phantoms = generate_phantoms(3, (16, 16), 3, seed=7)
        write_dataset(tmp_path / "data", phantoms, seed=7, classes=3)
        manifest = json.loads((tmp_path / "data" / "manifest.json").read_text())
        assert manifest["shape"] == [16, 16]
        assert [c["id"] for c in manifest["cases"]] == ["0000", "0001", "0002"]
        dataset = read_dataset(tmp_path / "data")
        assert dataset.seed == 7 and dataset.classes == 3 and dataset.shape == (16, 16)
        for original, loaded in zip(phantoms, dataset.cases):
            np.testing.assert_array_equal(original.image.data, loaded.image.data)
            np.testing.assert_array_equal(original.labels, loaded.labels)
            assert loaded.labels.dtype == np.int64

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError):
            read_dataset(tmp_path)

    def test_missing_case(self, tmp_path):
        write_dataset(tmp_path, generate_phantoms(2, (16, 16), 2, seed=1), seed=1, classes=2)
        (tmp_path / "case_0001" / "labels.hsf").unlink()
        with pytest.raises(DatasetError):
            read_dataset(tmp_path)

    def test_shape_mismatch(self, tmp_path):
        write_dataset(tmp_path, generate_phantoms(1, (16, 16), 2, seed=1), seed=1, classes=2)
        write_hsf(tmp_path / "case_0000" / "labels.hsf", np.zeros((8, 8)))
        with pytest.raises(DatasetError):
            read_dataset(tmp_path)

    def test_empty(self, tmp_path):
        with pytest.raises(DatasetError):
            write_dataset(tmp_path, [], seed=0, classes=2)


class TestSplit:
    def test_four_to_one(self):
        cases = generate_phantoms(10, (8, 8), 2, seed=0)
        train, validation = split_cases(cases, seed=3)
        assert len(train) == 8 and len(validation) == 2
        assert {id(c) for c in train}.isdisjoint(id(c) for c in validation)
        again, _ = split_cases(cases, seed=3)
        assert [c.seed for c in train] == [c.seed for c in again]

    def test_single_case_goes_to_training(self):
        cases = generate_phantoms(1, (8, 8), 2, seed=0)
        train, validation = split_cases(cases)
        assert len(train) == 1 and validation == []

    def test_stack(self):
        cases = generate_phantoms(3, (8, 8), 2, seed=0)
        images, labels = stack_cases(cases)
        assert images.shape == (3, 1, 8, 8)
        assert labels.shape == (3, 8, 8)
