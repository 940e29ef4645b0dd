from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pytest
import scipy.ndimage

from heatseg import *


def disk(shape: tuple[int, ...], center: tuple[float, ...], radius: float) -> np.ndarray:
    grid = np.meshgrid(*(np.arange(n) for n in shape), indexing="ij")
    return (sum((g - c) ** 2 for g, c in zip(grid, center)) <= radius**2).astype(np.int64)


class TestDsc:
    def test_identical(self):
        mask = disk((16, 16), (8, 8), 4)
        assert dsc(mask, mask, 1) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4), dtype=np.int64)
        b = np.zeros((4, 4), dtype=np.int64)
        a[0, 0] = b[3, 3] = 1
        assert dsc(a, b, 1) == 0.0

    def test_both_empty(self):
        assert dsc(np.zeros((4, 4)), np.zeros((4, 4)), 1) == 1.0

    def test_half_overlap(self):
        a = np.zeros((4, 4), dtype=np.int64)
        b = np.zeros((4, 4), dtype=np.int64)
        a[:2] = 1
        b[1:3] = 1
        assert dsc(a, b, 1) == pytest.approx(0.5)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            dsc(np.zeros((4, 4)), np.zeros((4, 5)), 1)


class TestBoundary:
    def test_filled_square(self):
        mask = np.zeros((5, 5), dtype=bool)
        mask[1:4, 1:4] = True
        expected = mask.copy()
        expected[2, 2] = False
        np.testing.assert_array_equal(boundary(mask), expected)

    def test_grid_edge_counts_as_boundary(self):
        expected = np.ones((3, 3), dtype=bool)
        expected[1, 1] = False
        np.testing.assert_array_equal(boundary(np.ones((3, 3), dtype=bool)), expected)

    def test_face_connectivity_only(self):
        """A voxel whose only outside neighbour is diagonal is interior."""
        mask = np.ones((5, 5), dtype=bool)
        mask[0, 0] = False
        assert not boundary(mask)[1, 1]


class TestNsd:
    def test_identical(self):
        mask = disk((20, 20), (10, 10), 5)
        assert nsd(mask, mask, 1) == 1.0

    def test_empty_cases(self):
        empty = np.zeros((8, 8), dtype=np.int64)
        assert nsd(empty, empty, 1) == 1.0
        assert nsd(disk((8, 8), (4, 4), 2), empty, 1) == 0.0

    def test_shift_within_tolerance(self):
        a = disk((24, 24), (12, 12), 6)
        b = disk((24, 24), (12, 13), 6)
        assert nsd(a, b, 1, tolerance=1.0) == 1.0
        assert nsd(a, b, 1, tolerance=0.0) < 1.0

    def test_far_apart(self):
        a = disk((40, 40), (8, 8), 3)
        b = disk((40, 40), (30, 30), 3)
        assert nsd(a, b, 1, tolerance=2.0) == 0.0

    def test_negative_tolerance(self):
        with pytest.raises(ContractError):
            nsd(np.zeros((4, 4)), np.zeros((4, 4)), 1, tolerance=-1.0)

    @pytest.mark.parametrize("shape", [(24, 24), (10, 12, 9)])
    @pytest.mark.parametrize("tolerance", [0.0, 1.0, 1.5, 2.5])
    def test_matches_bruteforce(self, rng, shape, tolerance):
        a = scipy.ndimage.binary_dilation(rng.uniform(size=shape) > 0.85).astype(np.int64)
        b = scipy.ndimage.binary_dilation(rng.uniform(size=shape) > 0.85).astype(np.int64)
        assert nsd(a, b, 1, tolerance) == nsd_bruteforce(a, b, 1, tolerance)

    def test_multiclass_selects_class(self):
        labels = disk((16, 16), (8, 8), 5) + disk((16, 16), (8, 8), 2)
        pred = labels.copy()
        pred[pred == 2] = 1
        assert nsd(pred, labels, 1) < 1.0
        assert nsd(labels, labels, 2) == 1.0


@dataclass
class Oracle:
    """Predicts each case's own labels, looked up by image content."""

    cases: list
    num_classes: int

    def predict(self, images: np.ndarray) -> SegmentationOutput:
        for case in self.cases:
            if np.array_equal(case.image.data, images[0]):
                probabilities = np.moveaxis(np.eye(self.num_classes)[case.labels], -1, 0)
                return SegmentationOutput(probabilities[None])
        raise AssertionError("unknown image")


class TestEvaluate:
    def test_perfect_segmenter(self):
        cases = generate_phantoms(3, (16, 16), 3, seed=7)
        report = evaluate(Oracle(cases, 3), cases, 3)
        assert report.class_ids == (1, 2)
        assert report.mean_dsc == 1.0 and report.mean_nsd == 1.0
        assert report.dsc_std == 0.0
        assert report.case_dsc.shape == (3, 2)

    def test_thread_count_does_not_change_result(self, monkeypatch):
        cases = generate_phantoms(4, (16, 16), 3, seed=2)
        network = build(NetworkConfig(patch_size=(16, 16), stages=3, pooling=(2, 2), base_channels=2, num_classes=3))
        single = evaluate(network, cases, 3)
        monkeypatch.setenv("HEATSEG_THREADS", "3")
        threaded = evaluate(network, cases, 3)
        np.testing.assert_array_equal(single.case_dsc, threaded.case_dsc)
        np.testing.assert_array_equal(single.case_nsd, threaded.case_nsd)

    def test_no_cases(self):
        with pytest.raises(ContractError):
            evaluate(Oracle([], 2), [], 2)


class TestReport:
    @pytest.fixture
    def report(self):
        return MetricReport(
            (1, 2),
            np.array([[1.0, 0.5], [0.5, 0.0]]),
            np.array([[1.0, 1.0], [0.5, 0.5]]),
            tolerance=1.5,
        )

    def test_aggregates(self, report):
        np.testing.assert_allclose(report.dsc, [0.75, 0.25])
        assert report.mean_dsc == pytest.approx(0.5)
        assert report.dsc_std == pytest.approx(0.25)
        assert report.nsd_std == pytest.approx(0.25)

    def test_json_round_trip(self, report, tmp_path):
        report.to_json(tmp_path / "metrics.json")
        loaded = MetricReport.from_json(tmp_path / "metrics.json")
        assert loaded.class_ids == (1, 2)
        assert loaded.tolerance == 1.5
        np.testing.assert_array_equal(loaded.case_dsc, report.case_dsc)

    def test_csv(self, report, tmp_path):
        report.to_csv(tmp_path / "metrics.csv")
        rows = MetricReport.read_csv(tmp_path / "metrics.csv")
        assert rows == {"1": (0.75, 0.75), "2": (0.25, 0.75), "mean": (0.5, 0.75)}

    def test_range_checked(self):
        with pytest.raises(ContractError):
            MetricReport((1,), np.array([[1.5]]), np.array([[1.0]]))
