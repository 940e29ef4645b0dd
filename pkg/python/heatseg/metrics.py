"""
Dice similarity and normalized surface distance, per class and aggregated over cases.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence, Union

import numpy as np
import scipy.ndimage
from scipy.spatial.distance import cdist

from . import config
from .data import Phantom
from .network import SegmentationOutput
from .tensor import ContractError

__all__ = [
    "Segmenter",
    "MetricReport",
    "dsc",
    "boundary",
    "nsd",
    "nsd_bruteforce",
    "case_metrics",
    "evaluate",
]

logger = logging.getLogger(__name__)

# Distances within this of the tolerance count as inside it
DISTANCE_SLACK = 1e-9


def _masks(pred: np.ndarray, target: np.ndarray, class_id: int) -> tuple[np.ndarray, np.ndarray]:
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ContractError(f"Prediction shape {pred.shape} != target shape {target.shape}")
    return pred == class_id, target == class_id


def dsc(pred: np.ndarray, target: np.ndarray, class_id: int) -> float:
    """
    ``2|P & T| / (|P| + |T|)``; 1.0 when both masks are empty.
    """
    p, t = _masks(pred, target, class_id)
    total = int(p.sum()) + int(t.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """
    Voxels of ``mask`` with at least one face neighbour outside it. Outside the grid counts as outside the mask.
    """
    structure = scipy.ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~scipy.ndimage.binary_erosion(mask, structure=structure, border_value=0)


def _empty_case(p: np.ndarray, t: np.ndarray) -> Union[float, None]:
    if not p.any() and not t.any():
        return 1.0
    if not p.any() or not t.any():
        return 0.0
    return None


def nsd(pred: np.ndarray, target: np.ndarray, class_id: int, tolerance: float = config.DEFAULT_NSD_TOLERANCE) -> float:
    """
    Fraction of the boundary voxels of both masks lying within ``tolerance`` voxels of the other mask's boundary.
    """
    if tolerance < 0:
        raise ContractError(f"Tolerance must be non-negative, got {tolerance}")
    p, t = _masks(pred, target, class_id)
    empty = _empty_case(p, t)
    if empty is not None:
        return empty
    bp, bt = boundary(p), boundary(t)
    to_target = scipy.ndimage.distance_transform_edt(~bt)
    to_pred = scipy.ndimage.distance_transform_edt(~bp)
    limit = tolerance + DISTANCE_SLACK
    within = int((to_target[bp] <= limit).sum()) + int((to_pred[bt] <= limit).sum())
    return within / (int(bp.sum()) + int(bt.sum()))


def nsd_bruteforce(
    pred: np.ndarray, target: np.ndarray, class_id: int, tolerance: float = config.DEFAULT_NSD_TOLERANCE
) -> float:
    """
    :func:`nsd` computed from all pairwise boundary distances. Quadratic in the boundary size.
    """
    p, t = _masks(pred, target, class_id)
    empty = _empty_case(p, t)
    if empty is not None:
        return empty
    points_p = np.argwhere(boundary(p)).astype(np.float64)
    points_t = np.argwhere(boundary(t)).astype(np.float64)
    distances = cdist(points_p, points_t)
    limit = tolerance + DISTANCE_SLACK
    within = int((distances.min(axis=1) <= limit).sum()) + int((distances.min(axis=0) <= limit).sum())
    return within / (len(points_p) + len(points_t))


class Segmenter(Protocol):
    def predict(self, images: np.ndarray) -> SegmentationOutput:
        ...


@dataclass(frozen=True)
class MetricReport:
    """
    Per-case, per-class DSC and NSD for the foreground classes ``class_ids``.
    """

    class_ids: tuple[int, ...]
    case_dsc: np.ndarray
    case_nsd: np.ndarray
    tolerance: float = config.DEFAULT_NSD_TOLERANCE

    def __post_init__(self) -> None:
        for values in (self.case_dsc, self.case_nsd):
            if values.shape != (values.shape[0], len(self.class_ids)):
                raise ContractError("Metric table must be (cases, classes)")
            if np.any(values < 0) or np.any(values > 1):
                raise ContractError("Metric values must lie in [0, 1]")

    @property
    def dsc(self) -> np.ndarray:
        """Per-class DSC averaged over cases."""
        return self.case_dsc.mean(axis=0)

    @property
    def nsd(self) -> np.ndarray:
        return self.case_nsd.mean(axis=0)

    @property
    def mean_dsc(self) -> float:
        return float(self.case_dsc.mean())

    @property
    def mean_nsd(self) -> float:
        return float(self.case_nsd.mean())

    @property
    def dsc_std(self) -> float:
        """Standard deviation across cases of the per-case mean over classes."""
        return float(self.case_dsc.mean(axis=1).std())

    @property
    def nsd_std(self) -> float:
        return float(self.case_nsd.mean(axis=1).std())

    def to_dict(self) -> dict:
        return {
            "class_ids": list(self.class_ids),
            "tolerance": self.tolerance,
            "case_dsc": self.case_dsc.tolist(),
            "case_nsd": self.case_nsd.tolist(),
            "dsc": self.dsc.tolist(),
            "nsd": self.nsd.tolist(),
            "mean_dsc": self.mean_dsc,
            "mean_nsd": self.mean_nsd,
            "dsc_std": self.dsc_std,
            "nsd_std": self.nsd_std,
        }

    def to_json(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> MetricReport:
        data = json.loads(Path(path).read_text())
        return cls(
            tuple(data["class_ids"]),
            np.asarray(data["case_dsc"], dtype=np.float64).reshape(-1, len(data["class_ids"])),
            np.asarray(data["case_nsd"], dtype=np.float64).reshape(-1, len(data["class_ids"])),
            float(data["tolerance"]),
        )

    def to_csv(self, path: Union[str, Path]) -> None:
        """
        One row per class with its mean DSC and NSD, then a ``mean`` row.
        """
        with Path(path).open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["class", "dsc", "nsd"])
            for class_id, d, n in zip(self.class_ids, self.dsc, self.nsd):
                writer.writerow([class_id, repr(float(d)), repr(float(n))])
            writer.writerow(["mean", repr(self.mean_dsc), repr(self.mean_nsd)])

    @staticmethod
    def read_csv(path: Union[str, Path]) -> dict[str, tuple[float, float]]:
        with Path(path).open(newline="") as f:
            return {row["class"]: (float(row["dsc"]), float(row["nsd"])) for row in csv.DictReader(f)}


def case_metrics(
    pred: np.ndarray, target: np.ndarray, class_ids: Sequence[int], tolerance: float
) -> tuple[list[float], list[float]]:
    return (
        [dsc(pred, target, c) for c in class_ids],
        [nsd(pred, target, c, tolerance) for c in class_ids],
    )


def evaluate(
    network: Segmenter,
    cases: Sequence[Phantom],
    num_classes: int,
    tolerance: float = config.DEFAULT_NSD_TOLERANCE,
) -> MetricReport:
    """
    Segments every case (argmax over class probabilities) and scores the foreground classes. Cases are spread over
    up to ``HEATSEG_THREADS`` worker threads; the result does not depend on the thread count.
    """
    if not cases:
        raise ContractError("Cannot evaluate an empty set of cases")
    class_ids = tuple(range(1, num_classes))

    def score(case: Phantom) -> tuple[list[float], list[float]]:
        pred = network.predict(case.image.data[None]).labels()[0]
        return case_metrics(pred, case.labels, class_ids, tolerance)

    workers = min(config.threads(), len(cases))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(score, cases))
    else:
        scores = [score(case) for case in cases]
    report = MetricReport(
        class_ids,
        np.array([s[0] for s in scores], dtype=np.float64).reshape(len(cases), len(class_ids)),
        np.array([s[1] for s in scores], dtype=np.float64).reshape(len(cases), len(class_ids)),
        tolerance,
    )
    logger.info("Evaluated %d cases: DSC %.4f, NSD %.4f", len(cases), report.mean_dsc, report.mean_nsd)
    return report
