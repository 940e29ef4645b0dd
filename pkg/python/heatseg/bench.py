"""
Timing harness for the operator complexity claims: median wall time per input size and a log-log slope fit.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import statistics
import timeit
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Literal, Sequence, Union

import numpy as np
import scipy.stats

from .hco import HcoLayer, predict_diffusivity
from .spectral import DiffusivityField, decay_filter, diffuse, explicit_heat_steps
from .ssm import scan_chunked
from .tensor import ContractError, DctMethod, FeatureField, dct_along, frequency_axis

__all__ = [
    "BenchMethod",
    "BenchRecord",
    "SlopeFit",
    "DEFAULT_SIZES",
    "DEFAULT_MIXER_SIZES",
    "DEFAULT_SCAN_LENGTHS",
    "median_time",
    "dense_operator",
    "spectral_filter",
    "bench_hco",
    "bench_spatial_oracle",
    "bench_quadratic_mixer",
    "bench_scan",
    "fit_slope",
    "fit_slopes",
    "write_records",
    "read_records",
    "write_slopes",
]

logger = logging.getLogger(__name__)

BenchMethod = Literal["separable-matmul", "fft-dct", "spatial-oracle", "quadratic-mixer", "chunked-scan"]

DEFAULT_SIZES = (64, 128, 256, 512)
# A dense N x N operator stops fitting in memory long before 512^2, so the quadratic control has its own sizes
DEFAULT_MIXER_SIZES = (16, 24, 32, 48, 64)
DEFAULT_SCAN_LENGTHS = (1024, 2048, 4096, 8192)
ORACLE_STEPS = 20
# Each timed run repeats the call until it takes at least this long
MIN_RUN_SECONDS = 5e-3


@dataclass(frozen=True)
class BenchRecord:
    op: str
    size: int
    seconds: float
    method: str


@dataclass(frozen=True)
class SlopeFit:
    method: str
    slope: float
    intercept: float
    r_squared: float


def median_time(fn: Callable[[], object], repeats: int = 5) -> float:
    """
    Median over ``repeats`` runs of the per-call wall time of ``fn``.
    """
    if repeats < 1:
        raise ContractError("Need at least one repeat")
    timer = timeit.Timer(fn)
    single = min(timer.repeat(repeat=2, number=1))
    number = max(1, math.ceil(MIN_RUN_SECONDS / max(single, 1e-9)))
    return statistics.median(timer.repeat(repeat=repeats, number=number)) / number


def _check_sizes(sizes: Sequence[int]) -> None:
    if list(sizes) != sorted(set(sizes)):
        raise ContractError(f"Sizes must be strictly increasing, got {list(sizes)}")


def _random_field(rng: np.random.Generator, side: int) -> FeatureField:
    return FeatureField(rng.standard_normal((1, side, side)))


def _layer_diffusivity(rng: np.random.Generator, side: int) -> DiffusivityField:
    return predict_diffusivity(HcoLayer.create((side, side), rng))


def spectral_filter(data: np.ndarray, multiplier: np.ndarray, method: DctMethod = "matmul") -> np.ndarray:
    """
    DCT, multiply, inverse DCT over the spatial axes of ``(C, *spatial)`` data, with no validation.
    """
    axes = tuple(range(1, data.ndim))
    return dct_along(dct_along(data, axes, method=method) * multiplier, axes, inverse=True, method=method)


def bench_hco(sides: Sequence[int], repeats: int = 5, method: DctMethod = "matmul", seed: int = 0) -> list[BenchRecord]:
    """
    Times the heat conduction operator on ``side x side`` grids. The diffusivity and its decay multiplier are
    computed once per size; the timed call is DCT, decay and inverse DCT.
    """
    _check_sizes(sides)
    rng = np.random.default_rng(seed)
    tag = "separable-matmul" if method == "matmul" else "fft-dct"
    records = []
    for side in sides:
        data, k = _random_field(rng, side).data, _layer_diffusivity(rng, side)
        multiplier = decay_filter([frequency_axis(n) for n in k.spatial_shape], k)
        seconds = median_time(lambda: spectral_filter(data, multiplier, method), repeats)
        records.append(BenchRecord("heat_filter", side * side, seconds, tag))
        logger.info("%s N=%d: %.3e s", tag, side * side, seconds)
    return records


def bench_spatial_oracle(
    sides: Sequence[int], repeats: int = 5, steps: int = ORACLE_STEPS, seed: int = 0
) -> list[BenchRecord]:
    """
    Times a fixed number of explicit finite-difference heat steps, which is linear in N.
    """
    _check_sizes(sides)
    rng = np.random.default_rng(seed)
    records = []
    for side in sides:
        field = _random_field(rng, side)
        seconds = median_time(lambda: explicit_heat_steps(field, 0.1, dt=0.1, steps=steps), repeats)
        records.append(BenchRecord("heat_steps", side * side, seconds, "spatial-oracle"))
        logger.info("spatial-oracle N=%d: %.3e s", side * side, seconds)
    return records


def dense_operator(k: DiffusivityField) -> np.ndarray:
    """
    The ``N x N`` spatial matrix of diffusion with ``k``, built by diffusing every basis field at once.
    """
    n = int(np.prod(k.spatial_shape))
    basis = FeatureField(np.eye(n).reshape(n, *k.spatial_shape))
    return diffuse(basis, k).data.reshape(n, n).T


def bench_quadratic_mixer(sides: Sequence[int], repeats: int = 5, seed: int = 0) -> list[BenchRecord]:
    """
    Times applying the dense equivalent of the operator, a global mixer with O(N^2) cost.
    """
    _check_sizes(sides)
    rng = np.random.default_rng(seed)
    records = []
    for side in sides:
        field = _random_field(rng, side)
        operator = dense_operator(_layer_diffusivity(rng, side))
        flat = field.data.reshape(-1)
        seconds = median_time(lambda: operator @ flat, repeats)
        records.append(BenchRecord("dense_mixer", side * side, seconds, "quadratic-mixer"))
        logger.info("quadratic-mixer N=%d: %.3e s", side * side, seconds)
    return records


def bench_scan(lengths: Sequence[int], repeats: int = 5, states: int = 8, seed: int = 0) -> list[BenchRecord]:
    """
    Times the chunked linear scan ``h_t = a * h_{t-1} + b_t`` over one sequence of each length, which is linear in
    the length.
    """
    _check_sizes(lengths)
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.5, 0.95, size=states)
    records = []
    for length in lengths:
        b = rng.standard_normal((1, length, states))
        seconds = median_time(lambda: scan_chunked(a, b), repeats)
        records.append(BenchRecord("linear_scan", length, seconds, "chunked-scan"))
        logger.info("chunked-scan L=%d: %.3e s", length, seconds)
    return records


def fit_slope(records: Sequence[BenchRecord]) -> SlopeFit:
    """
    Least-squares line through ``(log N, log seconds)``.
    """
    if len(records) < 2:
        raise ContractError("Need at least two sizes to fit a slope")
    fit = scipy.stats.linregress(np.log([r.size for r in records]), np.log([r.seconds for r in records]))
    return SlopeFit(records[0].method, float(fit.slope), float(fit.intercept), float(fit.rvalue**2))


def fit_slopes(records: Sequence[BenchRecord]) -> list[SlopeFit]:
    methods = list(dict.fromkeys(r.method for r in records))
    return [fit_slope([r for r in records if r.method == m]) for m in methods]


def write_records(path: Union[str, Path], records: Sequence[BenchRecord]) -> None:
    with Path(path).open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["op", "size", "seconds", "method"])
        writer.writeheader()
        for record in records:
            writer.writerow({**asdict(record), "seconds": repr(record.seconds)})


def read_records(path: Union[str, Path]) -> list[BenchRecord]:
    with Path(path).open(newline="") as f:
        return [
            BenchRecord(row["op"], int(row["size"]), float(row["seconds"]), row["method"]) for row in csv.DictReader(f)
        ]


def write_slopes(path: Union[str, Path], fits: Sequence[SlopeFit]) -> None:
    Path(path).write_text(json.dumps([asdict(f) for f in fits], indent=2) + "\n")
