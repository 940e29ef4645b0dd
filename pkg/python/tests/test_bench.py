from __future__ import annotations

import json

import numpy as np
import pytest

from heatseg import *


def synthetic(method: str, slope: float, sizes=(64, 128, 256, 512)) -> list[BenchRecord]:
    return [BenchRecord("op", n, 1e-6 * n**slope, method) for n in sizes]


class TestFit:
    @pytest.mark.parametrize("slope", [1.0, 1.5, 2.0])
    def test_recovers_power_law(self, slope):
        fit = fit_slope(synthetic("m", slope))
        assert fit.slope == pytest.approx(slope)
        assert fit.r_squared == pytest.approx(1.0)
        assert fit.method == "m"

    def test_needs_two_sizes(self):
        with pytest.raises(ContractError):
            fit_slope(synthetic("m", 1.0, sizes=(64,)))

    def test_groups_by_method_in_order(self):
        fits = fit_slopes(synthetic("b", 2.0) + synthetic("a", 1.0))
        assert [f.method for f in fits] == ["b", "a"]
        assert [round(f.slope, 6) for f in fits] == [2.0, 1.0]


def test_records_csv(tmp_path):
    records = synthetic("fft-dct", 1.5)
    write_records(tmp_path / "bench.csv", records)
    assert read_records(tmp_path / "bench.csv") == records


def test_slopes_json(tmp_path):
    write_slopes(tmp_path / "slopes.json", fit_slopes(synthetic("spatial-oracle", 1.0)))
    (entry,) = json.loads((tmp_path / "slopes.json").read_text())
    assert set(entry) == {"method", "slope", "intercept", "r_squared"}
    assert entry["slope"] == pytest.approx(1.0)


@pytest.mark.parametrize("sizes", [(8, 4), (4, 4), (8, 16, 12)])
def test_sizes_must_increase(sizes):
    with pytest.raises(ContractError):
        bench_hco(sizes, repeats=1)


def test_median_time_needs_a_repeat():
    with pytest.raises(ContractError):
        median_time(lambda: None, repeats=0)


def test_dense_operator_matches_diffusion(rng):
    k = predict_diffusivity(HcoLayer.create((6, 5), rng))
    field = FeatureField(rng.standard_normal((1, 6, 5)))
    np.testing.assert_allclose(dense_operator(k) @ field.data.reshape(-1), diffuse(field, k).data.reshape(-1))


def test_record_tags():
    records = (
        bench_hco((4, 8), repeats=1, method="fft")
        + bench_spatial_oracle((4, 8), repeats=1)
        + bench_scan((32, 64), repeats=1)
    )
    assert [(r.op, r.size, r.method) for r in records] == [
        ("heat_filter", 16, "fft-dct"),
        ("heat_filter", 64, "fft-dct"),
        ("heat_steps", 16, "spatial-oracle"),
        ("heat_steps", 64, "spatial-oracle"),
        ("linear_scan", 32, "chunked-scan"),
        ("linear_scan", 64, "chunked-scan"),
    ]
    assert all(r.seconds > 0 for r in records)


@pytest.mark.parametrize("method", ["matmul", "fft"])
def test_spectral_filter_matches_diffusion(rng, method):
    k = predict_diffusivity(HcoLayer.create((6, 5), rng))
    field = FeatureField(rng.standard_normal((2, 6, 5)))
    multiplier = decay_filter([frequency_axis(6), frequency_axis(5)], k)
    np.testing.assert_allclose(spectral_filter(field.data, multiplier, method), diffuse(field, k).data, atol=1e-12)


@pytest.mark.slow
class TestComplexity:
    def test_separable_operator_is_n_to_the_one_and_a_half(self):
        fit = fit_slope(bench_hco(DEFAULT_SIZES))
        assert 1.3 <= fit.slope <= 1.7
        assert fit.r_squared >= 0.98

    def test_dense_mixer_is_quadratic(self):
        assert fit_slope(bench_quadratic_mixer(DEFAULT_MIXER_SIZES)).slope >= 1.8

    def test_scan_is_linear(self):
        assert abs(fit_slope(bench_scan(DEFAULT_SCAN_LENGTHS)).slope - 1.0) <= 0.15
