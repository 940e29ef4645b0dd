"""
A gated selective scan standing in for a Mamba block.

For a sequence ``x_t`` the block computes::

    z_t = layer_norm(x_t)
    h_t = a * h_{t-1} + (1 - a) * silu(gate_proj(z_t)) * in_proj(z_t)
    y_t = out_proj(h_t) + x_t

with ``a = sigmoid(decay_logits)`` in (0, 1) per state channel, so the state is a geometrically weighted average of
gated inputs and never grows past the input bound.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import config
from .autograd import (
    Module,
    Node,
    Parameter,
    apply_op,
    as_node,
    matmul,
    moveaxis,
    no_grad,
    normalize,
    reshape,
    sigmoid,
    silu,
)
from .tensor import ContractError, FeatureField

__all__ = [
    "SsmBlock",
    "SpatialFlattening",
    "scan_sequential",
    "scan_chunked",
    "linear_scan",
    "ssm_forward",
    "flatten_spatial",
    "flatten_node",
    "unflatten_node",
]


def scan_sequential(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Reference loop for ``h_t = a * h_{t-1} + b_t`` over axis 1 of ``b`` ``(B, L, S)``, with ``h_{-1} = 0``.
    """
    h = np.zeros((b.shape[0], b.shape[2]), dtype=np.result_type(a, b))
    out = np.empty(b.shape, dtype=h.dtype)
    for t in range(b.shape[1]):
        h = a * h + b[:, t]
        out[:, t] = h
    return out


@functools.lru_cache(maxsize=8)
def _lag_table(length: int) -> tuple[np.ndarray, np.ndarray]:
    i = np.arange(length)
    lags = i[:, None] - i[None, :]
    return np.clip(lags, 0, None), lags >= 0


def scan_chunked(a: np.ndarray, b: np.ndarray, chunk: int = config.SCAN_CHUNK) -> np.ndarray:
    """
    The same recurrence evaluated a chunk at a time: inside a chunk ``h = T @ b + a^(i+1) * h_prev`` with the
    lower-triangular transfer matrix ``T[i, j] = a^(i-j)``. Work grows linearly with the sequence length.
    """
    batch, length, states = b.shape
    out = np.empty(b.shape, dtype=np.result_type(a, b))
    h = np.zeros((batch, states), dtype=out.dtype)
    for start in range(0, length, chunk):
        block = b[:, start : start + chunk]
        size = block.shape[1]
        lags, causal = _lag_table(size)
        transfer = np.where(causal[..., None], a ** lags[..., None], 0.0)
        carry = a ** np.arange(1, size + 1)[:, None]
        local = np.einsum("ijs,bjs->bis", transfer, block) + carry[None] * h[:, None, :]
        out[:, start : start + size] = local
        h = local[:, -1]
    return out


def linear_scan(a: Node, b: Node, kernel: Callable[[np.ndarray, np.ndarray], np.ndarray] = scan_chunked) -> Node:
    """
    Differentiable ``h_t = a * h_{t-1} + b_t``. The adjoint is the same recurrence run backwards in time:
    ``lam_t = g_t + a * lam_{t+1}``, giving ``db = lam`` and ``da = sum(lam_t * h_{t-1})``.
    """
    a, b = as_node(a), as_node(b)
    h = kernel(a.value, b.value)

    def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        lam = kernel(a.value, g[:, ::-1])[:, ::-1]
        previous = np.concatenate([np.zeros_like(h[:, :1]), h[:, :-1]], axis=1)
        return np.sum(lam * previous, axis=(0, 1)), lam

    return apply_op(h, (a, b), "linear_scan", vjp)


@dataclass(eq=False)
class SsmBlock(Module):
    norm_w: Parameter
    norm_b: Parameter
    in_w: Parameter
    in_b: Parameter
    gate_w: Parameter
    gate_b: Parameter
    decay_logits: Parameter
    out_w: Parameter

    @classmethod
    def create(
        cls, dim: int, rng: np.random.Generator, prefix: str = "ssm.0", state_dim: int = config.DEFAULT_STATE_DIM
    ) -> SsmBlock:
        # Decays spread over (0.5, 0.95) so the states cover short and long ranges
        decays = np.linspace(0.5, 0.95, state_dim)
        return cls(
            norm_w=Parameter(np.ones(dim), name=f"{prefix}.norm.weight"),
            norm_b=Parameter(np.zeros(dim), name=f"{prefix}.norm.bias"),
            in_w=Parameter(rng.normal(0.0, 1.0 / np.sqrt(dim), (dim, state_dim)), name=f"{prefix}.in_proj.weight"),
            in_b=Parameter(np.zeros(state_dim), name=f"{prefix}.in_proj.bias"),
            gate_w=Parameter(rng.normal(0.0, 1.0 / np.sqrt(dim), (dim, state_dim)), name=f"{prefix}.gate_proj.weight"),
            gate_b=Parameter(np.zeros(state_dim), name=f"{prefix}.gate_proj.bias"),
            decay_logits=Parameter(np.log(decays / (1.0 - decays)), name=f"{prefix}.decay_logits"),
            out_w=Parameter(rng.normal(0.0, 1.0 / state_dim, (state_dim, dim)), name=f"{prefix}.out_proj.weight"),
        )

    @property
    def dim(self) -> int:
        return self.in_w.shape[0]

    @property
    def state_dim(self) -> int:
        return self.in_w.shape[1]

    def __call__(self, x: Node) -> Node:
        """
        Mixes a ``(B, L, dim)`` sequence.
        """
        x = as_node(x)
        if x.ndim != 3 or x.shape[1] == 0:
            raise ContractError(f"SSM block needs a non-empty (batch, length, dim) sequence, got {x.shape}")
        z = normalize(x, axes=(2,)) * self.norm_w + self.norm_b
        u = matmul(z, self.in_w) + self.in_b
        gate = silu(matmul(z, self.gate_w) + self.gate_b)
        a = sigmoid(self.decay_logits)
        h = linear_scan(a, (1.0 - a) * gate * u)
        return matmul(h, self.out_w) + x

    def mix(self, x: Node) -> Node:
        """
        Mixes a ``(B, C, *spatial)`` field along its row-major flattening.
        """
        x = as_node(x)
        return unflatten_node(self(flatten_node(x)), x.shape)


def ssm_forward(block: SsmBlock, x: np.ndarray) -> np.ndarray:
    """
    Runs ``block`` on one ``(L, dim)`` sequence of feature vectors without recording a tape.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ContractError(f"Expected a non-empty (length, dim) sequence, got shape {x.shape}")
    with no_grad():
        return block(x[None]).value[0]


@dataclass(frozen=True)
class SpatialFlattening:
    """
    Row-major flattening of a ``(C, *spatial)`` field into a ``(N, C)`` sequence, with its exact inverse.
    """

    channels: int
    spatial_shape: tuple[int, ...]

    def flatten(self, field: FeatureField) -> np.ndarray:
        if field.shape != (self.channels, *self.spatial_shape):
            raise ContractError(f"Field shape {field.shape} does not match {(self.channels, *self.spatial_shape)}")
        return field.data.reshape(self.channels, -1).T.copy()

    def unflatten(self, sequence: np.ndarray) -> FeatureField:
        return FeatureField(np.asarray(sequence).T.reshape(self.channels, *self.spatial_shape))


def flatten_spatial(field: FeatureField) -> tuple[np.ndarray, SpatialFlattening]:
    mapping = SpatialFlattening(field.channels, field.spatial_shape)
    return mapping.flatten(field), mapping


def flatten_node(x: Node) -> Node:
    batch, channels = x.shape[:2]
    return moveaxis(reshape(x, (batch, channels, -1)), 1, 2)


def unflatten_node(sequence: Node, shape: tuple[int, ...]) -> Node:
    return reshape(moveaxis(sequence, 2, 1), shape)
