"""
The learnable heat conduction operator: DCT, per-frequency diffusivity predicted from frequency value embeddings,
exponential decay, IDCT.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import config
from .autograd import Module, Node, Parameter, as_node, matmul, no_grad, reshape, softplus
from .spectral import DiffusivityField, diffuse_node
from .tensor import ContractError, FeatureField

__all__ = ["FrequencyValueEmbedding", "HcoLayer", "predict_diffusivity", "hco_forward"]


@dataclass(eq=False)
class FrequencyValueEmbedding(Module):
    """
    A learnable ``(*grid, embed_dim)`` table, one embedding per DCT frequency.
    """

    table: Parameter

    @property
    def grid_shape(self) -> tuple[int, ...]:
        return self.table.shape[:-1]

    @property
    def embed_dim(self) -> int:
        return self.table.shape[-1]


@dataclass(eq=False)
class HcoLayer(Module):
    fve: FrequencyValueEmbedding
    head_w: Parameter
    head_b: Parameter
    discrete: bool = False

    @classmethod
    def create(
        cls,
        grid_shape: Sequence[int],
        rng: np.random.Generator,
        prefix: str = "hco.0",
        embed_dim: int = config.DEFAULT_EMBED_DIM,
    ) -> HcoLayer:
        """
        FVE entries start at N(0, 0.02^2), head weights at N(0, 1/sqrt(embed_dim)) (a variance, like the FVE
        one) and the head bias at -1, so the initial diffusivity sits near softplus(-1) ~= 0.31.
        """
        grid_shape = tuple(grid_shape)
        table = rng.normal(0.0, 0.02, size=(*grid_shape, embed_dim))
        head_w = rng.normal(0.0, embed_dim**-0.25, size=(embed_dim, 1))
        return cls(
            FrequencyValueEmbedding(Parameter(table, name=f"{prefix}.fve")),
            Parameter(head_w, name=f"{prefix}.head.w"),
            Parameter(np.array([-1.0]), name=f"{prefix}.head.b"),
        )

    @property
    def grid_shape(self) -> tuple[int, ...]:
        return self.fve.grid_shape

    def diffusivity(self) -> Node:
        """
        ``softplus(head(FVE)) + K_FLOOR`` as a node shaped like the frequency grid.
        """
        logits = matmul(self.fve.table, self.head_w) + self.head_b
        return softplus(reshape(logits, self.grid_shape)) + config.K_FLOOR

    def __call__(self, x: Node) -> Node:
        """
        Diffuses a ``(B, C, *grid)`` batch, sharing one diffusivity field across batch and channels.
        """
        x = as_node(x)
        if x.shape[2:] != self.grid_shape:
            raise ContractError(f"HCO grid {self.grid_shape} does not match input spatial shape {x.shape[2:]}")
        return diffuse_node(x, self.diffusivity(), discrete=self.discrete)


def predict_diffusivity(layer: HcoLayer) -> DiffusivityField:
    with no_grad():
        return DiffusivityField(layer.diffusivity().value)


def hco_forward(layer: HcoLayer, x: FeatureField) -> FeatureField:
    with no_grad():
        return FeatureField(layer(x.data[None]).value[0])
