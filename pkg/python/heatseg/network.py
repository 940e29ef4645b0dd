"""
The U-shaped segmentation network and its ablation variants.

The encoder has ``stages`` levels. Level 0 runs two residual blocks at full resolution; every later level first
downsamples with a strided 3x3 convolution and then runs two residual blocks. Channel width doubles per level.
Depending on the variant, upper encoder levels end with a selective-scan block and/or a heat conduction operator,
and the two deepest encoder-to-decoder links pass through heat conduction operators. The decoder mirrors the
encoder with transposed convolutions and skip concatenation, and a 1x1 convolution plus softmax produces per-voxel
class probabilities.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Literal, Optional, Sequence, Union, cast, get_args

import numpy as np
from typing_extensions import assert_never

from . import config
from .autograd import (
    Module,
    Node,
    Parameter,
    as_node,
    concat,
    conv,
    conv_transpose,
    leaky_relu,
    log,
    mean,
    no_grad,
    normalize,
    reshape,
    softmax,
    sum_,
)
from .hco import HcoLayer
from .ssm import SsmBlock
from .tensor import ContractError, FeatureField

__all__ = [
    "ConfigError",
    "LabelRangeError",
    "Variant",
    "VARIANTS",
    "ABLATION_VARIANTS",
    "DISPLAY_NAMES",
    "HcoPlacement",
    "NetworkConfig",
    "PRESET_DIR",
    "FULL_SCALE_PRESETS",
    "load_preset",
    "SegmentationOutput",
    "Conv",
    "ConvTranspose",
    "InstanceNorm",
    "ResidualBlock",
    "EncoderStage",
    "DecoderStage",
    "Network",
    "build",
    "one_hot",
    "segmentation_loss",
    "DICE_SMOOTH",
]


class ConfigError(ValueError):
    pass


class LabelRangeError(ValueError):
    pass


Variant = Literal["baseline", "mamba_enc", "mamba_bot", "hco_bot", "hco_enc", "umh"]
VARIANTS: tuple[str, ...] = get_args(Variant)
# The rows of the ablation table, in order
ABLATION_VARIANTS: tuple[Variant, ...] = ("baseline", "mamba_enc", "hco_bot", "hco_enc", "umh")
DISPLAY_NAMES: dict[str, str] = {
    "baseline": "nnUNet",
    "mamba_enc": "U-Mamba_Enc",
    "mamba_bot": "U-Mamba_Bot",
    "hco_bot": "U-HCO_Bot",
    "hco_enc": "U-HCO_Enc",
    "umh": "UMH",
}

HcoPlacement = Literal["skip", "serial"]

DICE_SMOOTH = 1e-5


@dataclass(frozen=True)
class NetworkConfig:
    """
    Patch size, depth, per-axis pooling counts and the variant selector. Axis ``a`` is halved at levels
    ``1..pooling[a]``, so its length must be divisible by ``2 ** pooling[a]``.
    """

    patch_size: tuple[int, ...]
    stages: int
    pooling: tuple[int, ...]
    base_channels: int = 8
    num_classes: int = 2
    variant: str = "umh"
    in_channels: int = 1
    batch_size: int = 1
    embed_dim: int = config.DEFAULT_EMBED_DIM
    state_dim: int = config.DEFAULT_STATE_DIM
    decoder_blocks: int = 1
    hco_placement: str = "skip"

    def __post_init__(self) -> None:
        object.__setattr__(self, "patch_size", tuple(int(n) for n in self.patch_size))
        object.__setattr__(self, "pooling", tuple(int(n) for n in self.pooling))
        rank = len(self.patch_size)
        if rank not in (2, 3):
            raise ConfigError(f"Patch size must have 2 or 3 axes, got {self.patch_size}")
        if len(self.pooling) != rank:
            raise ConfigError(f"Pooling {self.pooling} does not match patch rank {rank}")
        if self.stages < 3:
            raise ConfigError(f"Need at least 3 stages, got {self.stages}")
        if self.num_classes < 2:
            raise ConfigError(f"Need at least 2 classes, got {self.num_classes}")
        for n, count in zip(self.patch_size, self.pooling):
            if count < 0 or count > self.stages - 1:
                raise ConfigError(f"Pooling count {count} must lie in [0, {self.stages - 1}]")
            if n % 2**count:
                raise ConfigError(f"Axis length {n} is not divisible by 2**{count}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"Unknown variant {self.variant!r}, expected one of {', '.join(VARIANTS)}")
        if self.hco_placement not in get_args(HcoPlacement):
            raise ConfigError(f"Unknown HCO placement {self.hco_placement!r}")
        for name in ("base_channels", "in_channels", "batch_size", "embed_dim", "state_dim", "decoder_blocks"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def spatial_rank(self) -> int:
        return len(self.patch_size)

    def stride(self, stage: int) -> tuple[int, ...]:
        """
        Downsampling stride entering ``stage`` (all ones for stage 0).
        """
        return tuple(2 if 0 < stage <= count else 1 for count in self.pooling)

    def stage_shape(self, stage: int) -> tuple[int, ...]:
        return tuple(n // 2 ** min(stage, count) for n, count in zip(self.patch_size, self.pooling))

    def stage_channels(self, stage: int) -> int:
        return self.base_channels * 2**stage

    def with_variant(self, variant: str) -> NetworkConfig:
        return replace(self, variant=variant)

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["patch_size"] = list(self.patch_size)
        data["pooling"] = list(self.pooling)
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> NetworkConfig:
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(f"Invalid network config: {e}") from e

    def to_json(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> NetworkConfig:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(data)


PRESET_DIR = Path(__file__).parent / "presets"


def load_preset(name_or_path: Union[str, Path]) -> NetworkConfig:
    """
    Loads a config from a JSON path, or from a shipped preset by name (``2d-small``, ``3d-small``).
    """
    path = Path(name_or_path)
    for candidate in (path, PRESET_DIR / path.name, PRESET_DIR / f"{path.name}.json"):
        if candidate.is_file():
            return NetworkConfig.from_json(candidate)
    raise ConfigError(f"No config file or preset named {str(name_or_path)!r}")


# Full-scale configurations of the abdominal CT and MRI models, kept for reference only. The leading entry of
# each published patch size is the batch size.
FULL_SCALE_PRESETS: dict[str, NetworkConfig] = {
    "abdomen-ct-3d": NetworkConfig(
        patch_size=(40, 224, 192), stages=6, pooling=(3, 5, 5), base_channels=32, num_classes=14, batch_size=2
    ),
    "abdomen-mr-3d": NetworkConfig(
        patch_size=(48, 160, 224), stages=6, pooling=(3, 5, 5), base_channels=32, num_classes=14, batch_size=2
    ),
    "abdomen-mr-2d": NetworkConfig(
        patch_size=(320, 320), stages=7, pooling=(6, 6), base_channels=32, num_classes=14, batch_size=30
    ),
}


@dataclass(frozen=True)
class SegmentationOutput:
    """
    Per-voxel class probabilities ``(B, num_classes, *spatial)``.
    """

    probabilities: np.ndarray

    def __post_init__(self) -> None:
        totals = self.probabilities.sum(axis=1)
        if np.any(self.probabilities < 0) or not np.allclose(totals, 1.0, rtol=0, atol=1e-6):
            raise ContractError("Class probabilities must be non-negative and sum to 1 at every voxel")

    @property
    def num_classes(self) -> int:
        return self.probabilities.shape[1]

    def labels(self) -> np.ndarray:
        return np.argmax(self.probabilities, axis=1)

    def fields(self) -> list[FeatureField]:
        return [FeatureField(p) for p in self.probabilities]


##
# Layers
##


def _he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


@dataclass(eq=False)
class Conv(Module):
    weight: Parameter
    bias: Optional[Parameter]
    stride: tuple[int, ...]
    padding: tuple[int, ...]

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        name: str,
        c_in: int,
        c_out: int,
        kernel: int,
        rank: int,
        stride: Sequence[int] = (),
        bias: bool = True,
    ) -> Conv:
        shape = (c_out, c_in) + (kernel,) * rank
        return cls(
            Parameter(_he_normal(rng, shape, c_in * kernel**rank), name=f"{name}.weight"),
            Parameter(np.zeros(c_out), name=f"{name}.bias") if bias else None,
            tuple(stride) or (1,) * rank,
            (kernel // 2,) * rank,
        )

    def __call__(self, x: Node) -> Node:
        return conv(x, self.weight, self.bias, self.stride, self.padding)


@dataclass(eq=False)
class ConvTranspose(Module):
    weight: Parameter
    bias: Parameter
    stride: tuple[int, ...]

    @classmethod
    def create(cls, rng: np.random.Generator, name: str, c_in: int, c_out: int, stride: Sequence[int]) -> ConvTranspose:
        stride = tuple(stride)
        shape = (c_in, c_out) + stride
        return cls(
            Parameter(_he_normal(rng, shape, c_in), name=f"{name}.weight"),
            Parameter(np.zeros(c_out), name=f"{name}.bias"),
            stride,
        )

    def __call__(self, x: Node) -> Node:
        return conv_transpose(x, self.weight, self.bias, self.stride)


@dataclass(eq=False)
class InstanceNorm(Module):
    """
    Normalizes each channel of each sample over the spatial axes, then applies a per-channel affine map.
    """

    weight: Parameter
    bias: Parameter

    @classmethod
    def create(cls, name: str, channels: int) -> InstanceNorm:
        return cls(
            Parameter(np.ones(channels), name=f"{name}.weight"),
            Parameter(np.zeros(channels), name=f"{name}.bias"),
        )

    def __call__(self, x: Node) -> Node:
        rank = x.ndim - 2
        normed = normalize(x, axes=tuple(range(2, x.ndim)))
        return normed * _per_channel(self.weight, rank) + _per_channel(self.bias, rank)


def _per_channel(p: Parameter, rank: int) -> Node:
    return reshape(p, (1, -1) + (1,) * rank)


@dataclass(eq=False)
class ResidualBlock(Module):
    """
    conv -> norm -> leaky ReLU -> conv -> norm, added to the input (or its 1x1 projection), then leaky ReLU.
    """

    conv1: Conv
    norm1: InstanceNorm
    conv2: Conv
    norm2: InstanceNorm
    skip: Optional[Conv] = None

    @classmethod
    def create(cls, rng: np.random.Generator, name: str, c_in: int, c_out: int, rank: int) -> ResidualBlock:
        # Convolutions feeding a norm get no bias: the norm would cancel it
        return cls(
            Conv.create(rng, f"{name}.conv1", c_in, c_out, 3, rank, bias=False),
            InstanceNorm.create(f"{name}.norm1", c_out),
            Conv.create(rng, f"{name}.conv2", c_out, c_out, 3, rank, bias=False),
            InstanceNorm.create(f"{name}.norm2", c_out),
            Conv.create(rng, f"{name}.skip", c_in, c_out, 1, rank, bias=False) if c_in != c_out else None,
        )

    def __call__(self, x: Node) -> Node:
        y = leaky_relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return leaky_relu(y + (self.skip(x) if self.skip is not None else x))


@dataclass(eq=False)
class EncoderStage(Module):
    down: Optional[Conv]
    blocks: list[ResidualBlock]
    ssm: Optional[SsmBlock] = None
    hco: Optional[HcoLayer] = None

    def __call__(self, x: Node) -> Node:
        if self.down is not None:
            x = self.down(x)
        for block in self.blocks:
            x = block(x)
        if self.ssm is not None:
            x = self.ssm.mix(x)
        if self.hco is not None:
            x = self.hco(x)
        return x


@dataclass(eq=False)
class DecoderStage(Module):
    up: ConvTranspose
    blocks: list[ResidualBlock]

    def __call__(self, x: Node, skip: Node) -> Node:
        x = concat([self.up(x), skip], axis=1)
        for block in self.blocks:
            x = block(x)
        return x


@dataclass(eq=False)
class Network(Module):
    """
    ``network(images)`` maps a ``(B, in_channels, *patch)`` batch to softmax probabilities
    ``(B, num_classes, *patch)``.
    """

    config: NetworkConfig
    encoder: list[EncoderStage]
    # decoder[i] produces the resolution of encoder stage ``stages - 2 - i``
    decoder: list[DecoderStage]
    head: Conv
    skip_hco: Optional[HcoLayer] = None
    bottleneck_hco: Optional[HcoLayer] = None
    serial_hcos: list[HcoLayer] = field(default_factory=list)

    @property
    def hco_layers(self) -> list[HcoLayer]:
        layers = [stage.hco for stage in self.encoder if stage.hco is not None]
        layers += [hco for hco in (self.skip_hco, self.bottleneck_hco) if hco is not None]
        return layers + self.serial_hcos

    @property
    def ssm_blocks(self) -> list[SsmBlock]:
        return [stage.ssm for stage in self.encoder if stage.ssm is not None]

    def __call__(self, images: Union[Node, np.ndarray]) -> Node:
        x = as_node(images)
        expected = (self.config.in_channels, *self.config.patch_size)
        if x.shape[1:] != expected:
            raise ContractError(f"Expected input (batch, {', '.join(map(str, expected))}), got {x.shape}")
        skips = []
        for stage in self.encoder:
            x = stage(x)
            skips.append(x)
        skips.pop()
        if self.bottleneck_hco is not None:
            x = self.bottleneck_hco(x)
        if self.skip_hco is not None:
            skips[-1] = self.skip_hco(skips[-1])
        for hco in self.serial_hcos:
            x = hco(x)
        for stage, skip in zip(self.decoder, reversed(skips)):
            x = stage(x, skip)
        return softmax(self.head(x), axis=1)

    def predict(self, images: np.ndarray) -> SegmentationOutput:
        with no_grad():
            return SegmentationOutput(self(images).value)


def _layout(variant: Variant, stages: int) -> tuple[set[int], set[int], bool]:
    """
    Encoder stages with a selective-scan block, encoder stages with an HCO, and whether the two deepest links
    carry HCOs.
    """
    upper = set(range(stages - 1))
    if variant == "baseline":
        return set(), set(), False
    elif variant == "mamba_enc":
        return upper, set(), False
    elif variant == "mamba_bot":
        return {stages - 1}, set(), False
    elif variant == "hco_bot":
        return set(), set(), True
    elif variant == "hco_enc":
        return set(), upper, False
    elif variant == "umh":
        return upper, set(), True
    assert_never(variant)


def build(config: NetworkConfig, seed: int = 0) -> Network:
    rng = np.random.default_rng(seed)
    rank = config.spatial_rank
    ssm_stages, hco_stages, hco_links = _layout(cast(Variant, config.variant), config.stages)

    encoder = []
    for s in range(config.stages):
        c_out = config.stage_channels(s)
        c_in = config.in_channels if s == 0 else config.stage_channels(s - 1)
        down = None
        if s > 0:
            down = Conv.create(rng, f"enc.{s}.down", c_in, c_out, 3, rank, stride=config.stride(s))
            c_in = c_out
        blocks = [
            ResidualBlock.create(rng, f"enc.{s}.block{j}", c_in if j == 0 else c_out, c_out, rank) for j in range(2)
        ]
        encoder.append(
            EncoderStage(
                down,
                blocks,
                SsmBlock.create(c_out, rng, f"ssm.{s}", config.state_dim) if s in ssm_stages else None,
                HcoLayer.create(config.stage_shape(s), rng, f"hco.{s}", config.embed_dim) if s in hco_stages else None,
            )
        )

    decoder = []
    for s in reversed(range(config.stages - 1)):
        c_deep, c_out = config.stage_channels(s + 1), config.stage_channels(s)
        up = ConvTranspose.create(rng, f"dec.{s}.up", c_deep, c_out, config.stride(s + 1))
        blocks = [
            ResidualBlock.create(rng, f"dec.{s}.block{j}", 2 * c_out if j == 0 else c_out, c_out, rank)
            for j in range(config.decoder_blocks)
        ]
        decoder.append(DecoderStage(up, blocks))

    head = Conv.create(rng, "head", config.base_channels, config.num_classes, 1, rank)
    network = Network(config, encoder, decoder, head)

    if hco_links:
        deepest, below = config.stages - 1, config.stages - 2
        placement = cast(HcoPlacement, config.hco_placement)
        if placement == "skip":
            network.skip_hco = HcoLayer.create(config.stage_shape(below), rng, "hco.0", config.embed_dim)
            network.bottleneck_hco = HcoLayer.create(config.stage_shape(deepest), rng, "hco.1", config.embed_dim)
        elif placement == "serial":
            network.serial_hcos = [
                HcoLayer.create(config.stage_shape(deepest), rng, f"hco.{i}", config.embed_dim) for i in range(2)
            ]
        else:
            assert_never(placement)
    # Walking the parameters here catches duplicate registration at build time
    network.parameters()
    return network


##
# Loss
##


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """
    ``(B, *spatial)`` integer labels to ``(B, num_classes, *spatial)`` indicators.
    """
    classes = np.arange(num_classes).reshape((1, num_classes) + (1,) * (labels.ndim - 1))
    return (labels[:, None] == classes).astype(np.float64)


def _check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if not np.all(labels == np.round(labels)):
        raise LabelRangeError("Labels must be integers")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelRangeError(f"Labels must lie in [0, {num_classes}), got [{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


def segmentation_loss(pred: Union[Node, SegmentationOutput], target: np.ndarray) -> Node:
    """
    Soft Dice loss plus cross-entropy.

    Dice is computed per sample and class with smoothing ``DICE_SMOOTH`` and averaged; cross-entropy is averaged
    over samples and voxels. A perfect one-hot prediction gives 0.
    """
    probs = as_node(pred.probabilities) if isinstance(pred, SegmentationOutput) else pred
    num_classes = probs.shape[1]
    target = np.asarray(target)
    if target.shape != (probs.shape[0], *probs.shape[2:]):
        raise ContractError(f"Target shape {target.shape} does not match prediction {probs.shape}")
    indicators = one_hot(_check_labels(target, num_classes), num_classes)
    spatial = tuple(range(2, probs.ndim))

    intersection = sum_(probs * indicators, axis=spatial)
    denominator = sum_(probs, axis=spatial) + indicators.sum(axis=spatial)
    dice = (2.0 * intersection + DICE_SMOOTH) / (denominator + DICE_SMOOTH)
    cross_entropy = -mean(sum_(log(probs) * indicators, axis=1))
    return (1.0 - mean(dice)) + cross_entropy
