"""
Closed-form heat flow in the DCT domain, plus the spatial reference solvers it is checked against.

On a grid, ``u_t = k * laplacian(u)`` with reflective boundaries is diagonal in the DCT-II basis, so running it for
time ``t`` multiplies each coefficient by ``exp(-k * |w|^2 * t)``. The continuous form uses ``w^2`` per axis; the
``discrete`` form uses ``2 - 2 cos(w)``, the exact eigenvalues of the 5-point (7-point in 3D) Neumann Laplacian.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, replace
from typing import Sequence, Union

import numpy as np
import scipy.linalg

from .autograd import Node, apply_op, as_node
from .tensor import ContractError, DctMethod, FeatureField, FrequencyField, dct_along, dct_forward, dct_inverse

__all__ = [
    "DiffusivityDomainError",
    "DiffusivityField",
    "squared_frequency_norm",
    "decay_filter",
    "diffuse",
    "diffuse_node",
    "semigroup_compose",
    "explicit_heat_steps",
    "neumann_laplacian",
    "exact_discrete_diffusion",
    "smooth_random_field",
]


class DiffusivityDomainError(ValueError):
    pass


@dataclass(frozen=True)
class DiffusivityField:
    """
    Per-frequency diffusivity ``k(w) > 0`` and a diffusion time ``t > 0``. Only the product ``k * t`` matters.
    """

    values: np.ndarray
    time: float = 1.0

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(values)) or not np.all(values > 0):
            raise DiffusivityDomainError("Diffusivity must be finite and strictly positive")
        if not self.time > 0:
            raise DiffusivityDomainError(f"Diffusion time must be positive, got {self.time}")
        object.__setattr__(self, "values", values)

    @classmethod
    def uniform(cls, value: float, spatial_shape: Sequence[int], time: float = 1.0) -> DiffusivityField:
        return cls(np.full(tuple(spatial_shape), value, dtype=np.float64), time)

    @property
    def spatial_shape(self) -> tuple[int, ...]:
        return self.values.shape

    def with_time(self, time: float) -> DiffusivityField:
        return replace(self, time=time)


def _axis_term(omega: np.ndarray, discrete: bool) -> np.ndarray:
    return 2.0 - 2.0 * np.cos(omega) if discrete else omega**2


def _norm_from_axes(freq_axes: Sequence[np.ndarray], discrete: bool) -> np.ndarray:
    rank = len(freq_axes)
    total = np.zeros(tuple(len(a) for a in freq_axes))
    for axis, omega in enumerate(freq_axes):
        shape = [1] * rank
        shape[axis] = len(omega)
        total = total + _axis_term(np.asarray(omega, dtype=np.float64), discrete).reshape(shape)
    return total


@functools.lru_cache(maxsize=64)
def squared_frequency_norm(spatial_shape: tuple[int, ...], discrete: bool = False) -> np.ndarray:
    """
    ``|w|^2`` summed over spatial axes for the DCT grid of ``spatial_shape`` (read only, cached).
    """
    total = _norm_from_axes([np.pi * np.arange(n) / n for n in spatial_shape], discrete)
    total.setflags(write=False)
    return total


def decay_filter(freq_axes: Sequence[np.ndarray], k: DiffusivityField, discrete: bool = False) -> np.ndarray:
    """
    The multiplier ``exp(-k(w) * |w|^2 * t)``. Every entry lies in (0, 1] and the DC entry is exactly 1.
    """
    grid = tuple(len(a) for a in freq_axes)
    if k.spatial_shape != grid:
        raise ContractError(f"Diffusivity shape {k.spatial_shape} does not match frequency grid {grid}")
    return np.exp(-k.values * _norm_from_axes(freq_axes, discrete) * k.time)


def diffuse(
    field: FeatureField, k: DiffusivityField, discrete: bool = False, method: DctMethod = "matmul"
) -> FeatureField:
    """
    Runs heat flow on every channel of ``field``: IDCT(DCT(field) * decay).
    """
    if field.spatial_rank != len(k.spatial_shape):
        raise ContractError(f"Field spatial rank {field.spatial_rank} != diffusivity rank {len(k.spatial_shape)}")
    freq = dct_forward(field, method)
    multiplier = decay_filter(freq.freq_axes, k, discrete)
    return dct_inverse(FrequencyField(freq.data * multiplier, freq.freq_axes), method)


def diffuse_node(
    x: Union[Node, np.ndarray], k: Union[Node, np.ndarray], time: float = 1.0, discrete: bool = False
) -> Node:
    """
    Differentiable heat flow over the trailing ``k.ndim`` axes of ``x``; ``k`` is shared by all leading axes.

    The decay is real and diagonal in DCT space, so the adjoint with respect to ``x`` is the same filter, and
    the gradient with respect to ``k`` is ``sum(G * X * m * (-|w|^2 * t))`` over the leading axes.
    """
    x, k = as_node(x), as_node(k)
    rank = k.ndim
    grid = x.shape[x.ndim - rank :]
    if grid != k.shape:
        raise ContractError(f"Field spatial shape {grid} does not match diffusivity shape {k.shape}")
    if not np.all(k.value > 0):
        raise DiffusivityDomainError("Diffusivity must be strictly positive")
    axes = tuple(range(x.ndim - rank, x.ndim))
    leading = tuple(range(x.ndim - rank))
    norm2 = squared_frequency_norm(tuple(grid), discrete)
    multiplier = np.exp(-k.value * norm2 * time)
    coefficients = dct_along(x.value, axes)
    out = dct_along(coefficients * multiplier, axes, inverse=True)

    def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        g_coefficients = dct_along(g, axes)
        grad_x = dct_along(g_coefficients * multiplier, axes, inverse=True)
        grad_k = np.sum(g_coefficients * coefficients, axis=leading) * multiplier * (-norm2 * time)
        return grad_x, grad_k

    return apply_op(out, (x, k), "diffuse", vjp, (("time", time), ("discrete", discrete)))


def semigroup_compose(field: FeatureField, k: DiffusivityField, t1: float, t2: float) -> FeatureField:
    """
    Diffuses for ``t1`` and then for ``t2``; for heat flow this equals one diffusion for ``t1 + t2``.
    """
    return diffuse(diffuse(field, k.with_time(t1)), k.with_time(t2))


def _neumann_laplacian_apply(u: np.ndarray, spatial_axes: Sequence[int]) -> np.ndarray:
    out = np.zeros_like(u)
    for axis in spatial_axes:
        padded = np.pad(u, [(1, 1) if a == axis else (0, 0) for a in range(u.ndim)], mode="edge")
        ahead = [slice(None)] * u.ndim
        behind = [slice(None)] * u.ndim
        ahead[axis] = slice(2, None)
        behind[axis] = slice(None, -2)
        out += padded[tuple(ahead)] + padded[tuple(behind)] - 2.0 * u
    return out


def explicit_heat_steps(field: FeatureField, k: float, dt: float = 1e-4, steps: int = 10_000) -> FeatureField:
    """
    Forward Euler on ``u_t = k * laplacian(u)`` with the nearest-neighbour Laplacian and reflective boundaries.
    """
    if not k > 0:
        raise DiffusivityDomainError(f"Diffusivity must be positive, got {k}")
    u = field.data.astype(np.float64, copy=True)
    axes = tuple(range(1, u.ndim))
    for _ in range(steps):
        u += dt * k * _neumann_laplacian_apply(u, axes)
    return FeatureField(u)


def neumann_laplacian(spatial_shape: Sequence[int]) -> np.ndarray:
    """
    Dense nearest-neighbour Laplacian with reflective boundaries on a row-major flattened grid.
    """
    spatial_shape = tuple(spatial_shape)
    total = np.zeros((int(np.prod(spatial_shape)),) * 2)
    for axis, n in enumerate(spatial_shape):
        second_difference = -2.0 * np.eye(n) + np.eye(n, k=1) + np.eye(n, k=-1)
        second_difference[0, 0] += 1.0
        second_difference[-1, -1] += 1.0
        term = np.ones((1, 1))
        for other, m in enumerate(spatial_shape):
            term = np.kron(term, second_difference if other == axis else np.eye(m))
        total += term
    return total


def exact_discrete_diffusion(field: FeatureField, k: float, time: float = 1.0) -> FeatureField:
    """
    ``expm(k * t * L) @ u`` per channel, with ``L`` the dense Neumann Laplacian.
    """
    propagator = scipy.linalg.expm(k * time * neumann_laplacian(field.spatial_shape))
    flat = field.data.reshape(field.channels, -1)
    return FeatureField((flat @ propagator.T).reshape(field.shape))


def smooth_random_field(
    rng: np.random.Generator, shape: Sequence[int], cutoff: float = 0.25, method: DctMethod = "matmul"
) -> FeatureField:
    """
    Random field whose DCT coefficients vanish at index ``>= cutoff * L`` along each spatial axis.
    """
    coefficients = rng.standard_normal(tuple(shape))
    for axis, n in enumerate(shape[1:], start=1):
        keep = np.arange(n) < max(1, int(np.ceil(cutoff * n)))
        mask_shape = [1] * len(shape)
        mask_shape[axis] = n
        coefficients = coefficients * keep.reshape(mask_shape)
    return FeatureField(dct_along(coefficients, tuple(range(1, len(shape))), inverse=True, method=method))
