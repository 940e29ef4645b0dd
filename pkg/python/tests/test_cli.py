from __future__ import annotations

import json
from types import SimpleNamespace

import numpy as np
import pytest

import heatseg.cli
from heatseg import *
from heatseg.cli import AblationRow, format_ablation, main, read_ablation

TINY = NetworkConfig(patch_size=(16, 16), stages=3, pooling=(2, 2), base_channels=4, num_classes=3)


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    TINY.to_json(path)
    return path


@pytest.fixture
def dataset(tmp_path):
    path = tmp_path / "data"
    assert main(["-q", "gen", "--shape", "16x16", "--classes", "3", "--count", "5", "--out", str(path)]) == 0
    return path


def error_line(capsys) -> dict:
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_gen_writes_default_count(tmp_path, capsys):
    assert main(["gen", "--shape", "16x16", "--out", str(tmp_path / "data")]) == 0
    assert "wrote 20 cases" in capsys.readouterr().out
    assert len(list((tmp_path / "data").glob("case_*"))) == 20
    assert read_dataset(tmp_path / "data").classes == 3


def test_train_writes_artifacts(tmp_path, dataset, tiny_config, capsys):
    out = tmp_path / "run"
    argv = ["train", "--config", str(tiny_config), "--data", str(dataset), "--epochs", "1", "--out", str(out)]
    assert main(argv) == 0
    assert "UMH: final loss" in capsys.readouterr().out
    assert len(TrainingReport.read_csv(out / "training.csv").losses) == 1
    assert load_network(out / "checkpoint.zip").config == NetworkConfig.from_json(out / "config.json")


def test_train_shape_mismatch(tmp_path, dataset, capsys):
    assert main(["train", "--data", str(dataset), "--epochs", "1", "--out", str(tmp_path / "run")]) == 3
    assert error_line(capsys)["error"] == "DatasetError"


def test_train_divergence_exit_code(tmp_path, tiny_config, monkeypatch, capsys):
    def diverge(*args, **kwargs):
        raise TrainingDivergedError(3, float("nan"))

    monkeypatch.setattr(heatseg.cli, "train", diverge)
    assert main(["train", "--config", str(tiny_config), "--out", str(tmp_path / "run")]) == 4
    assert error_line(capsys) == {"error": "TrainingDivergedError", "code": 4, "message": "Loss became nan at step 3"}


def test_eval_with_perfect_segmenter(tmp_path, dataset, monkeypatch, capsys):
    cases = read_dataset(dataset).cases

    def predict(images: np.ndarray) -> SegmentationOutput:
        case = next(c for c in cases if np.array_equal(c.image.data, images[0]))
        return SegmentationOutput(np.moveaxis(np.eye(3)[case.labels], -1, 0)[None])

    oracle = SimpleNamespace(predict=predict, config=SimpleNamespace(num_classes=3))
    monkeypatch.setattr(heatseg.cli, "load_network", lambda path: oracle)
    out = tmp_path / "eval"
    assert main(["eval", "--checkpoint", "unused.zip", "--data", str(dataset), "--out", str(out)]) == 0
    assert "mean DSC: 1.0000" in capsys.readouterr().out
    assert MetricReport.from_json(out / "metrics.json").mean_nsd == 1.0


def test_eval_missing_checkpoint(tmp_path, dataset, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "absent.zip"), "--data", str(dataset)]) == 3
    assert error_line(capsys)["code"] == 3


def test_missing_data(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "run")]) == 3
    assert error_line(capsys)["error"] == "DatasetError"


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["fly"],
        ["gen"],
        ["train", "--epochs", "many"],
        ["bench", "--sizes", "8,16,32"],
        ["bench", "--sizes", "8,16,32,64", "--repeats", "2"],
        ["bench", "--sizes", "8,x"],
    ],
)
def test_usage_errors(argv, capsys):
    assert main(argv) == 2
    error = error_line(capsys)
    assert error["code"] == 2
    assert set(error) == {"error", "code", "message"}


def test_check_command(capsys):
    assert main(["-q", "check"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == len(CHECKS)
    assert all(line.startswith("PASS ") for line in lines)


def test_check_failure_exit_code(monkeypatch, capsys):
    monkeypatch.setattr(heatseg.cli, "run_checks", lambda seed: [CheckResult("off", False, 1.0, 0.1)])
    assert main(["check"]) == 1
    assert capsys.readouterr().out.startswith("FAIL off")


def test_ablation_table():
    rows = [AblationRow(v, 0.5, 0.1, 0.6, 0.2) for v in ABLATION_VARIANTS]
    table = format_ablation(rows)
    assert "| UMH | 0.5000 ± 0.1000 | 0.6000 ± 0.2000 |" in table
    assert "| UMH | 0.8719±0.0628 | 0.9037±0.0516 |" in table


@pytest.mark.slow
def test_ablate(tmp_path, dataset, tiny_config, capsys):
    out = tmp_path / "ablation"
    argv = ["-q", "ablate", "--config", str(tiny_config), "--data", str(dataset), "--epochs", "1", "--out", str(out)]
    assert main(argv) == 0
    rows = read_ablation(out / "ablation.csv")
    assert [r.variant for r in rows] == list(ABLATION_VARIANTS)
    assert all(0.0 <= r.dsc <= 1.0 and 0.0 <= r.nsd <= 1.0 for r in rows)
    assert capsys.readouterr().out.endswith((out / "ablation.md").read_text())


@pytest.mark.slow
def test_ablate_default_phantoms_segment_well(tmp_path, capsys):
    out = tmp_path / "ablation"
    assert main(["-q", "ablate", "--config", "2d-small", "--epochs", "30", "--out", str(out)]) == 0
    rows = read_ablation(out / "ablation.csv")
    assert len(rows) == 5
    assert all(r.dsc >= 0.5 for r in rows), rows
    assert "not reproduced" in capsys.readouterr().out


@pytest.mark.slow
def test_bench(tmp_path, capsys):
    out = tmp_path / "bench"
    argv = ["bench", "--sizes", "8,16,24,32", "--mixer-sizes", "4,8,12,16"]
    argv += ["--scan-lengths", "64,128", "--out", str(out)]
    assert main(["-q", *argv]) == 0
    methods = [fit["method"] for fit in json.loads((out / "slopes.json").read_text())]
    assert methods == ["separable-matmul", "fft-dct", "spatial-oracle", "quadratic-mixer", "chunked-scan"]
    assert len(read_records(out / "bench.csv")) == 18
