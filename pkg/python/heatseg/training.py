"""
The training loop: shuffled mini-batches, Dice + cross-entropy loss, Adam/AdamW/SGD updates.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Optional, Sequence, Union, cast, get_args

import numpy as np
from typing_extensions import assert_never

from .autograd import AdamState, adam_step, backward, sgd_step
from .checkpoint import load_checkpoint, restore_parameters, save_checkpoint
from .data import Phantom, stack_cases
from .metrics import dsc
from .network import ConfigError, Network, NetworkConfig, build, segmentation_loss

__all__ = [
    "OptimizerName",
    "OptimizerConfig",
    "TrainingDivergedError",
    "TrainingReport",
    "train",
    "train_dsc",
    "load_network",
]

logger = logging.getLogger(__name__)

OptimizerName = Literal["adam", "adamw", "sgd"]


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "adam"
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 1

    def __post_init__(self) -> None:
        if self.name not in get_args(OptimizerName):
            raise ConfigError(f"Unknown optimizer {self.name!r}, expected one of {', '.join(get_args(OptimizerName))}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("Learning rate and weight decay must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("Batch size must be positive")


class TrainingDivergedError(RuntimeError):
    """
    Raised when the loss stops being finite. ``step`` counts optimizer steps from 0.
    """

    def __init__(self, step: int, loss: float) -> None:
        super().__init__(f"Loss became {loss} at step {step}")
        self.step = step
        self.loss = loss


@dataclass
class TrainingReport:
    """
    Per-epoch mean loss and training-set foreground DSC, plus the final parameter values.
    """

    losses: list[float] = field(default_factory=list)
    train_dsc: list[float] = field(default_factory=list)
    params: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def to_csv(self, path: Union[str, Path]) -> None:
        with Path(path).open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "loss", "train_dsc"])
            for epoch, (loss, score) in enumerate(zip(self.losses, self.train_dsc), start=1):
                writer.writerow([epoch, repr(loss), repr(score)])

    @classmethod
    def read_csv(cls, path: Union[str, Path]) -> TrainingReport:
        report = cls()
        with Path(path).open(newline="") as f:
            for row in csv.DictReader(f):
                report.losses.append(float(row["loss"]))
                report.train_dsc.append(float(row["train_dsc"]))
        return report


def load_network(path: Union[str, Path]) -> Network:
    """
    Rebuilds the network recorded in a checkpoint and restores its parameters.
    """
    stored = load_checkpoint(path)
    network = build(NetworkConfig.from_dict(stored.config))
    restore_parameters(network.parameters(), stored.arrays)
    return network


def train_dsc(network: Network, cases: Sequence[Phantom]) -> float:
    """
    Mean foreground DSC of the network's argmax segmentation over ``cases``.
    """
    scores = []
    for case in cases:
        pred = network.predict(case.image.data[None]).labels()[0]
        scores.extend(dsc(pred, case.labels, c) for c in range(1, network.config.num_classes))
    return float(np.mean(scores))


def _step(network: Network, optimizer: OptimizerConfig, state: AdamState) -> None:
    params = network.parameters()
    name = cast(OptimizerName, optimizer.name)
    if name == "sgd":
        sgd_step(params, optimizer.lr, optimizer.weight_decay)
    elif name == "adam":
        # Plain Adam folds weight decay into the gradient as an L2 term
        for p in params:
            assert p.grad is not None
            p.grad = p.grad + optimizer.weight_decay * p.value
        adam_step(params, state, optimizer.lr, optimizer.beta1, optimizer.beta2, optimizer.eps)
    elif name == "adamw":
        adam_step(params, state, optimizer.lr, optimizer.beta1, optimizer.beta2, optimizer.eps, optimizer.weight_decay)
    else:
        assert_never(name)


def train(
    network: Network,
    cases: Sequence[Phantom],
    optimizer: OptimizerConfig,
    epochs: int,
    seed: int = 0,
    checkpoint: Optional[Union[str, Path]] = None,
    on_epoch: Optional[Callable[[int, float, float], None]] = None,
) -> TrainingReport:
    """
    Trains ``network`` in place. Batch order comes from ``seed`` alone, so equal seeds on equally built networks
    give identical loss curves. The epoch loss is the mean of the batch losses weighted by batch size.
    """
    if not cases:
        raise ConfigError("Training needs at least one case")
    rng = np.random.default_rng(seed)
    state = AdamState()
    report = TrainingReport()
    step = 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(cases))
        total, count = 0.0, 0
        for start in range(0, len(cases), optimizer.batch_size):
            batch = [cases[i] for i in order[start : start + optimizer.batch_size]]
            images, labels = stack_cases(batch)
            loss = segmentation_loss(network(images), labels)
            value = float(loss.value)
            if not math.isfinite(value):
                logger.error("Training diverged at step %d (loss %s)", step, value)
                raise TrainingDivergedError(step, value)
            backward(loss)
            _step(network, optimizer, state)
            total += value * len(batch)
            count += len(batch)
            step += 1
        epoch_loss = total / count
        epoch_dsc = train_dsc(network, cases)
        report.losses.append(epoch_loss)
        report.train_dsc.append(epoch_dsc)
        logger.info("epoch %d: loss %.6f, train DSC %.4f", epoch, epoch_loss, epoch_dsc)
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss, epoch_dsc)
    report.params = {p.name: p.value.copy() for p in network.parameters()}
    if checkpoint is not None:
        save_checkpoint(
            checkpoint, network.parameters(), network.config.to_dict(), {"epochs": epochs, "seed": seed}
        )
    return report
