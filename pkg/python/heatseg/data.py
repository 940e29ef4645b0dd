"""
Synthetic multi-organ phantoms and the on-disk dataset layout.

A phantom is a noisy single-channel image of overlapping soft-edged ellipses (ellipsoids in 3D), one per
foreground class, with the matching integer label field.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .tensor import FeatureField, HsfFormatError, read_hsf, write_hsf

__all__ = [
    "GenerationError",
    "DatasetError",
    "Ellipse",
    "Phantom",
    "Dataset",
    "class_intensity",
    "generate_phantom",
    "generate_phantoms",
    "write_dataset",
    "read_dataset",
    "split_cases",
    "stack_cases",
    "parse_shape",
]

logger = logging.getLogger(__name__)

BACKGROUND = 0.1
NOISE_SIGMA = 0.05
EDGE_WIDTH = 0.05
MIN_AXIS = 8
MAX_ATTEMPTS = 100


class GenerationError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Ellipse:
    class_id: int
    center: tuple[float, ...]
    semi_axes: tuple[float, ...]
    intensity: float


@dataclass(frozen=True)
class Phantom:
    """
    ``image`` is ``(1, *spatial)`` in [0, 1]; ``labels`` is ``(*spatial)`` with values in ``0..classes-1``.
    """

    image: FeatureField
    labels: np.ndarray
    seed: int
    ellipses: tuple[Ellipse, ...] = ()

    def __post_init__(self) -> None:
        if self.image.spatial_shape != self.labels.shape:
            raise DatasetError(f"Image {self.image.spatial_shape} and labels {self.labels.shape} differ in shape")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.labels.shape


def class_intensity(class_id: int, classes: int) -> float:
    """
    Centre of the intensity band of foreground class ``class_id``; bands are spread over [0.45, 0.9].
    """
    return 0.45 + 0.45 * (class_id - 1) / max(classes - 2, 1)


def _normalized_radius(grid: Sequence[np.ndarray], ellipse: Ellipse) -> np.ndarray:
    return np.sqrt(sum(((g - c) / a) ** 2 for g, c, a in zip(grid, ellipse.center, ellipse.semi_axes)))


def generate_phantom(shape: Sequence[int], classes: int, seed: int) -> Phantom:
    """
    Draws one phantom, redrawing until every foreground class keeps at least one voxel.
    """
    shape = tuple(int(n) for n in shape)
    if len(shape) not in (2, 3):
        raise GenerationError(f"Phantoms are 2D or 3D, got shape {shape}")
    if classes < 2:
        raise GenerationError(f"Need at least 2 classes, got {classes}")
    if min(shape) < MIN_AXIS:
        raise GenerationError(f"Every axis needs at least {MIN_AXIS} voxels to fit structures, got {shape}")
    rng = np.random.default_rng(seed)
    grid = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")
    for attempt in range(MAX_ATTEMPTS):
        image = np.full(shape, BACKGROUND)
        labels = np.zeros(shape, dtype=np.int64)
        ellipses = []
        for class_id in range(1, classes):
            ellipse = Ellipse(
                class_id,
                tuple(rng.uniform(0.25 * n, 0.75 * n) for n in shape),
                tuple(rng.uniform(0.12 * n, 0.25 * n) for n in shape),
                class_intensity(class_id, classes) + rng.uniform(-0.03, 0.03),
            )
            radius = _normalized_radius(grid, ellipse)
            # Later classes are painted over earlier ones
            weight = 1.0 / (1.0 + np.exp(-(1.0 - radius) / EDGE_WIDTH))
            image = image * (1.0 - weight) + ellipse.intensity * weight
            labels[radius <= 1.0] = class_id
            ellipses.append(ellipse)
        if len(np.unique(labels)) == classes:
            image = np.clip(image + rng.normal(0.0, NOISE_SIGMA, size=shape), 0.0, 1.0)
            return Phantom(FeatureField(image[None]), labels, seed, tuple(ellipses))
        logger.debug("Phantom %d lost a class on attempt %d, redrawing", seed, attempt)
    raise GenerationError(f"Could not place {classes - 1} visible structures in {shape} after {MAX_ATTEMPTS} draws")


def generate_phantoms(count: int, shape: Sequence[int], classes: int, seed: int) -> list[Phantom]:
    """
    ``count`` phantoms, each drawn from its own seed derived from ``seed``.
    """
    case_seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=count)
    return [generate_phantom(shape, classes, int(s)) for s in case_seeds]


def parse_shape(text: str) -> tuple[int, ...]:
    """
    ``"64x64"`` -> ``(64, 64)``.
    """
    try:
        return tuple(int(part) for part in text.lower().split("x"))
    except ValueError:
        raise GenerationError(f"Shape must look like 64x64 or 16x32x32, got {text!r}")


@dataclass(frozen=True)
class Dataset:
    cases: list[Phantom]
    seed: int
    shape: tuple[int, ...]
    classes: int


def write_dataset(directory: Union[str, Path], phantoms: Sequence[Phantom], seed: int, classes: int) -> Path:
    """
    Writes ``case_<id>/image.hsf``, ``case_<id>/labels.hsf`` and ``manifest.json`` under ``directory``.
    """
    if not phantoms:
        raise DatasetError("Refusing to write an empty dataset")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cases = []
    for index, phantom in enumerate(phantoms):
        case_id = f"{index:04d}"
        case_dir = directory / f"case_{case_id}"
        case_dir.mkdir(exist_ok=True)
        write_hsf(case_dir / "image.hsf", phantom.image.data)
        write_hsf(case_dir / "labels.hsf", phantom.labels.astype(np.float64))
        cases.append({"id": case_id, "seed": phantom.seed})
    manifest = {"seed": seed, "shape": list(phantoms[0].shape), "classes": classes, "cases": cases}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    logger.info("Wrote %d cases to %s", len(phantoms), directory)
    return directory


def read_dataset(directory: Union[str, Path]) -> Dataset:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise DatasetError(f"{directory} has no manifest.json")
    try:
        manifest = json.loads(manifest_path.read_text())
        shape = tuple(manifest["shape"])
        classes = int(manifest["classes"])
        records = manifest["cases"]
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise DatasetError(f"{manifest_path}: malformed manifest ({e})") from e
    if not records:
        raise DatasetError(f"{directory} contains no cases")
    phantoms = []
    for record in records:
        case_dir = directory / f"case_{record['id']}"
        try:
            image = read_hsf(case_dir / "image.hsf")
            labels = read_hsf(case_dir / "labels.hsf")
        except (FileNotFoundError, HsfFormatError) as e:
            raise DatasetError(f"{case_dir}: {e}") from e
        if labels.shape != shape or image.shape != (1, *shape):
            raise DatasetError(f"{case_dir}: shapes {image.shape}/{labels.shape} do not match manifest {shape}")
        phantoms.append(Phantom(FeatureField(image), labels.astype(np.int64), int(record.get("seed", 0))))
    return Dataset(phantoms, int(manifest.get("seed", 0)), shape, classes)


def split_cases(
    cases: Sequence[Phantom], train_fraction: float = 0.8, seed: int = 0
) -> tuple[list[Phantom], list[Phantom]]:
    """
    Deterministic shuffled train/validation split, 4:1 by default. The training side always gets at least one case.
    """
    order = np.random.default_rng(seed).permutation(len(cases))
    n_train = min(len(cases), max(1, int(round(train_fraction * len(cases)))))
    return [cases[i] for i in order[:n_train]], [cases[i] for i in order[n_train:]]


def stack_cases(cases: Sequence[Phantom]) -> tuple[np.ndarray, np.ndarray]:
    """
    Images ``(B, 1, *spatial)`` and labels ``(B, *spatial)`` for a batch of cases.
    """
    return np.stack([c.image.data for c in cases]), np.stack([c.labels for c in cases])
