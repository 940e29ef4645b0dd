"""
Checkpoint archives: a zip of ``manifest.json`` plus one ``params/<name>.npy`` record per parameter.
"""

from __future__ import annotations

import io
import json
import os
import tempfile
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence, Union

import numpy as np

from .autograd import Parameter
from .tensor import ContractError

__all__ = ["CheckpointError", "Checkpoint", "save_checkpoint", "load_checkpoint", "restore_parameters"]

FORMAT = "heatseg-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict[str, Any]
    arrays: dict[str, np.ndarray]
    metadata: dict[str, Any] = field(default_factory=dict)


def save_checkpoint(
    path: Union[str, Path],
    params: Sequence[Parameter],
    config: dict[str, Any],
    metadata: dict[str, Any] | None = None,
) -> None:
    """
    Writes the archive to a temporary file in the target directory and renames it into place, so readers never
    see a partial checkpoint.
    """
    path = Path(path)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "config": config,
        "metadata": metadata or {},
        "params": [{"name": p.name, "shape": list(p.value.shape)} for p in params],
    }
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as raw, zipfile.ZipFile(raw, "w") as archive:
            archive.writestr("manifest.json", json.dumps(manifest, indent=2))
            for p in params:
                buffer = io.BytesIO()
                np.save(buffer, np.ascontiguousarray(p.value, dtype="<f8"), allow_pickle=False)
                archive.writestr(f"params/{p.name}.npy", buffer.getvalue())
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    try:
        archive = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, OSError) as e:
        raise CheckpointError(f"{path}: not a checkpoint archive ({e})") from e
    with archive:
        try:
            manifest = json.loads(archive.read("manifest.json"))
        except KeyError as e:
            raise CheckpointError(f"{path}: missing manifest.json") from e
        if manifest.get("format") != FORMAT:
            raise CheckpointError(f"{path}: unknown format {manifest.get('format')!r}")
        arrays = {}
        for record in manifest["params"]:
            name = record["name"]
            array = np.load(io.BytesIO(archive.read(f"params/{name}.npy")), allow_pickle=False)
            if list(array.shape) != record["shape"]:
                raise CheckpointError(f"{path}: {name} has shape {array.shape}, manifest says {record['shape']}")
            arrays[name] = array
    return Checkpoint(manifest["config"], arrays, manifest.get("metadata", {}))


def restore_parameters(params: Sequence[Parameter], arrays: dict[str, np.ndarray]) -> None:
    """
    Copies stored values into ``params``. The name sets and every shape must match exactly.
    """
    names = {p.name for p in params}
    if names != set(arrays):
        missing = sorted(names - set(arrays))
        extra = sorted(set(arrays) - names)
        raise ContractError(f"Checkpoint does not match network: missing {missing}, unexpected {extra}")
    for p in params:
        stored = arrays[p.name]
        if stored.shape != p.value.shape:
            raise ContractError(f"{p.name}: checkpoint shape {stored.shape} != parameter shape {p.value.shape}")
        p.value = stored.astype(np.float64, copy=True)
        p.grad = np.zeros_like(p.value)
