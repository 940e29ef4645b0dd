"""
Numerical property checks of the transforms, the heat operator, the gradients and the metrics.

Each check draws its own random inputs from a seed and returns the worst observed error, so the suite can be run
from the command line (``heatseg check``) as well as from the tests.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.ndimage

from .autograd import Node, Parameter, backward, no_grad
from .hco import HcoLayer
from .metrics import nsd, nsd_bruteforce
from .spectral import (
    DiffusivityField,
    diffuse,
    exact_discrete_diffusion,
    explicit_heat_steps,
    semigroup_compose,
    smooth_random_field,
)
from .ssm import scan_chunked, scan_sequential
from .tensor import FeatureField, dct_forward, dct_inverse

__all__ = [
    "CheckResult",
    "Check",
    "CHECKS",
    "numerical_gradient",
    "gradient_error",
    "direct_dct",
    "run_checks",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    error: float
    threshold: float


@dataclass(frozen=True)
class Check:
    name: str
    threshold: float
    measure: Callable[[np.random.Generator], float]

    def run(self, seed: int) -> CheckResult:
        error = float(self.measure(np.random.default_rng(seed)))
        return CheckResult(self.name, bool(error <= self.threshold), error, self.threshold)


def numerical_gradient(f: Callable[[], float], array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """
    Central differences of ``f`` with respect to every entry of ``array``, which is perturbed in place.
    """
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = f()
        flat[i] = original - h
        minus = f()
        flat[i] = original
        out[i] = (plus - minus) / (2 * h)
    return grad


def gradient_error(loss: Callable[[], Node], leaves: Sequence[Node], h: float = 1e-5) -> float:
    """
    Largest relative error between the analytic gradient of ``loss()`` and central differences, over ``leaves``.
    """
    for leaf in leaves:
        leaf.grad = np.zeros_like(leaf.value)
    backward(loss())
    worst = 0.0
    for leaf in leaves:
        assert leaf.grad is not None
        analytic = leaf.grad.copy()

        def evaluate() -> float:
            with no_grad():
                return float(loss().value)

        numeric = numerical_gradient(evaluate, leaf.value, h)
        scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
        worst = max(worst, float(np.max(np.abs(analytic - numeric)) / scale))
    return worst


def direct_dct(x: np.ndarray) -> np.ndarray:
    """
    Orthonormal DCT-II over the spatial axes of ``(C, *spatial)`` by direct summation, one axis at a time.
    """
    out = np.asarray(x, dtype=np.float64)
    for axis in range(1, out.ndim):
        n = out.shape[axis]
        moved = np.moveaxis(out, axis, -1)
        result = np.zeros_like(moved)
        for k in range(n):
            scale = np.sqrt(1.0 / n) if k == 0 else np.sqrt(2.0 / n)
            for j in range(n):
                result[..., k] += scale * np.cos(np.pi * k * (2 * j + 1) / (2 * n)) * moved[..., j]
        out = np.moveaxis(result, -1, axis)
    return out


def _random_shape(rng: np.random.Generator, low: int = 1, high: int = 9) -> tuple[int, ...]:
    rank = int(rng.integers(2, 4))
    return (int(rng.integers(1, 4)),) + tuple(int(n) for n in rng.integers(low, high, size=rank))


def _dct_round_trip(rng: np.random.Generator) -> float:
    worst = 0.0
    for _ in range(50):
        x = FeatureField(rng.standard_normal(_random_shape(rng)))
        worst = max(worst, float(np.max(np.abs(dct_inverse(dct_forward(x)).data - x.data))))
    return worst


def _parseval(rng: np.random.Generator) -> float:
    worst = 0.0
    for _ in range(50):
        x = FeatureField(rng.standard_normal(_random_shape(rng)))
        worst = max(worst, abs(np.linalg.norm(dct_forward(x).data) - np.linalg.norm(x.data)))
    return worst


def _dct_direct(rng: np.random.Generator) -> float:
    worst = 0.0
    for _ in range(50):
        x = rng.standard_normal(_random_shape(rng, high=7))
        worst = max(worst, float(np.max(np.abs(dct_forward(FeatureField(x)).data - direct_dct(x)))))
    return worst


def _discrete_oracle(rng: np.random.Generator) -> float:
    x = FeatureField(rng.standard_normal((1, 16, 16)))
    k = 0.05
    ours = diffuse(x, DiffusivityField.uniform(k, (16, 16)), discrete=True)
    return float(np.max(np.abs(ours.data - exact_discrete_diffusion(x, k).data)))


def _finite_difference(rng: np.random.Generator) -> float:
    x = smooth_random_field(rng, (1, 16, 16))
    k = 0.05
    ours = diffuse(x, DiffusivityField.uniform(k, (16, 16)))
    reference = explicit_heat_steps(x, k, dt=1e-4, steps=10_000)
    return float(np.linalg.norm(ours.data - reference.data) / np.linalg.norm(reference.data))


def _random_diffusivity(rng: np.random.Generator, shape: Sequence[int]) -> DiffusivityField:
    return DiffusivityField(rng.uniform(1e-3, 2.0, size=tuple(shape)), float(rng.uniform(0.1, 2.0)))


def _contraction(rng: np.random.Generator) -> float:
    worst = 0.0
    for _ in range(100):
        x = FeatureField(rng.standard_normal(_random_shape(rng)))
        out = diffuse(x, _random_diffusivity(rng, x.spatial_shape))
        worst = max(worst, float(np.linalg.norm(out.data) - np.linalg.norm(x.data)))
    # Any growth counts as a failure; shrinkage is reported as 0
    return max(worst, 0.0)


def _mean_preservation(rng: np.random.Generator) -> float:
    worst = 0.0
    for _ in range(100):
        x = FeatureField(rng.standard_normal(_random_shape(rng)))
        out = diffuse(x, _random_diffusivity(rng, x.spatial_shape))
        spatial = tuple(range(1, x.data.ndim))
        worst = max(worst, float(np.max(np.abs(out.data.mean(axis=spatial) - x.data.mean(axis=spatial)))))
    return worst


def _semigroup(rng: np.random.Generator) -> float:
    worst = 0.0
    for _ in range(100):
        x = FeatureField(rng.standard_normal(_random_shape(rng)))
        k = _random_diffusivity(rng, x.spatial_shape)
        t1, t2 = rng.uniform(0.05, 1.0, size=2)
        split = semigroup_compose(x, k, float(t1), float(t2))
        whole = diffuse(x, k.with_time(float(t1 + t2)))
        worst = max(worst, float(np.max(np.abs(split.data - whole.data))))
    return worst


def _constant_fixed_point(rng: np.random.Generator) -> float:
    worst = 0.0
    for _ in range(100):
        shape = _random_shape(rng)
        x = FeatureField(np.broadcast_to(rng.standard_normal((shape[0],) + (1,) * (len(shape) - 1)), shape).copy())
        out = diffuse(x, _random_diffusivity(rng, x.spatial_shape))
        worst = max(worst, float(np.max(np.abs(out.data - x.data))))
    return worst


def _hco_gradients(rng: np.random.Generator) -> float:
    layer = HcoLayer.create((6, 5), rng, embed_dim=3)
    x = Parameter(rng.standard_normal((2, 2, 6, 5)), name="x")
    weights = rng.standard_normal((2, 2, 6, 5))
    leaves = [x, layer.fve.table, layer.head_w, layer.head_b]
    return gradient_error(lambda: (layer(x) * weights).sum(), leaves)


def _scan_oracle(rng: np.random.Generator) -> float:
    a = rng.uniform(0.05, 0.99, size=4)
    b = rng.standard_normal((2, 300, 4))
    return float(np.max(np.abs(scan_chunked(a, b) - scan_sequential(a, b))))


def _random_blob(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    mask = rng.uniform(size=shape) > 0.7
    if rng.uniform() < 0.5:
        mask = scipy.ndimage.binary_dilation(mask)
    return mask.astype(np.int64)


def _nsd_oracle(rng: np.random.Generator) -> float:
    worst = 0.0
    for shape in [(32, 32), (12, 12, 12)]:
        for tolerance in (0.0, 1.0, 1.5, 3.0):
            a, b = _random_blob(rng, shape), _random_blob(rng, shape)
            worst = max(worst, abs(nsd(a, b, 1, tolerance) - nsd_bruteforce(a, b, 1, tolerance)))
    return worst


CHECKS: tuple[Check, ...] = (
    Check("dct round trip", 1e-10, _dct_round_trip),
    Check("dct parseval", 1e-10, _parseval),
    Check("dct matches direct summation", 1e-12, _dct_direct),
    Check("discrete decay matches exact Laplacian exponential", 1e-10, _discrete_oracle),
    Check("continuous decay matches finite differences", 2e-2, _finite_difference),
    Check("diffusion is a contraction", 1e-12, _contraction),
    Check("diffusion preserves the mean", 1e-10, _mean_preservation),
    Check("semigroup composition", 1e-9, _semigroup),
    Check("constant fields are fixed points", 1e-10, _constant_fixed_point),
    Check("hco gradients match finite differences", 1e-6, _hco_gradients),
    Check("chunked scan matches sequential loop", 1e-12, _scan_oracle),
    Check("nsd matches all-pairs oracle", 0.0, _nsd_oracle),
)


def run_checks(seed: int = 0, checks: Sequence[Check] = CHECKS) -> list[CheckResult]:
    results = []
    for check in checks:
        result = check.run(seed)
        logger.info("%s: %s (error %.3e)", check.name, "PASS" if result.passed else "FAIL", result.error)
        results.append(result)
    return results
