"""
Command line entry point: ``heatseg gen|train|eval|ablate|bench|check``.

Every command writes its artifacts under ``--out`` and exits 0 on success. Failures print a single JSON line
``{"error": ..., "code": ..., "message": ...}`` to stderr and exit with the code from :data:`EXIT_CODES`.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NoReturn, Optional, Sequence, Union

from . import config
from .bench import (
    DEFAULT_MIXER_SIZES,
    DEFAULT_SCAN_LENGTHS,
    DEFAULT_SIZES,
    bench_hco,
    bench_quadratic_mixer,
    bench_scan,
    bench_spatial_oracle,
    fit_slopes,
    write_records,
    write_slopes,
)
from .checkpoint import CheckpointError
from .checks import run_checks
from .data import (
    DatasetError,
    GenerationError,
    Phantom,
    generate_phantoms,
    parse_shape,
    read_dataset,
    split_cases,
    write_dataset,
)
from .metrics import MetricReport, evaluate
from .network import (
    ABLATION_VARIANTS,
    DISPLAY_NAMES,
    VARIANTS,
    ConfigError,
    LabelRangeError,
    NetworkConfig,
    build,
    load_preset,
)
from .tensor import ContractError, HsfFormatError
from .training import OptimizerConfig, TrainingDivergedError, load_network, train

__all__ = [
    "UsageError",
    "EXIT_CODES",
    "AblationRow",
    "REFERENCE_ABLATION",
    "make_parser",
    "format_ablation",
    "write_ablation",
    "read_ablation",
    "main",
]

logger = logging.getLogger(__name__)


class UsageError(Exception):
    pass


EXIT_CODES: tuple[tuple[type[BaseException], int], ...] = (
    (UsageError, 2),
    (ConfigError, 2),
    (ContractError, 2),
    (TrainingDivergedError, 4),
    (DatasetError, 3),
    (GenerationError, 3),
    (HsfFormatError, 3),
    (CheckpointError, 3),
    (LabelRangeError, 3),
    (FileNotFoundError, 3),
)

CHECKS_FAILED = 1

# Default phantom set used when train/ablate get no --data directory
DEFAULT_CASES = 20
DEFAULT_DATA_SEED = 7

# DSC and NSD reported for the full-scale abdominal CT models, mean ± std over test cases
REFERENCE_ABLATION: dict[str, tuple[str, str]] = {
    "baseline": ("0.8615±0.0790", "0.8972±0.0824"),
    "mamba_enc": ("0.8638±0.0908", "0.8980±0.0921"),
    "hco_bot": ("0.8618±0.0941", "0.8965±0.0978"),
    "hco_enc": ("0.8575±0.0854", "0.8895±0.0857"),
    "umh": ("0.8719±0.0628", "0.9037±0.0516"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        raise UsageError(message)


def _sizes(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}")


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="heatseg", description="Heat conduction operator segmentation toolkit")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="log debug messages")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = commands.add_parser("gen", help="generate a synthetic phantom dataset")
    gen.add_argument("--shape", default="64x64", help="grid shape, e.g. 64x64 or 16x32x32")
    gen.add_argument("--classes", type=int, default=3, help="number of classes including background")
    gen.add_argument("--count", type=int, default=DEFAULT_CASES)
    gen.add_argument("--seed", type=int, default=DEFAULT_DATA_SEED)
    gen.add_argument("--out", type=Path, required=True)

    def model_flags(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--config", default="2d-small", help="preset name or path to a config JSON")
        sub.add_argument("--data", type=Path, help="dataset directory (default: generate phantoms in memory)")
        sub.add_argument("--epochs", type=int, default=30)
        sub.add_argument("--lr", type=float, default=3e-3)
        sub.add_argument("--optimizer", choices=["adam", "adamw", "sgd"], default="adam")
        sub.add_argument("--weight-decay", type=float, default=0.0)
        sub.add_argument("--seed", type=int, default=0)

    tr = commands.add_parser("train", help="train one network variant")
    model_flags(tr)
    tr.add_argument("--variant", choices=VARIANTS, help="overrides the variant in the config")
    tr.add_argument("--out", type=Path, default=Path("heatseg-run"))

    ev = commands.add_parser("eval", help="score a checkpoint on a dataset")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--data", type=Path, required=True)
    ev.add_argument("--tolerance", type=float, default=config.DEFAULT_NSD_TOLERANCE, help="NSD tolerance in voxels")
    ev.add_argument("--out", type=Path)

    ab = commands.add_parser("ablate", help="train and compare the ablation variants")
    model_flags(ab)
    ab.add_argument("--tolerance", type=float, default=config.DEFAULT_NSD_TOLERANCE)
    ab.add_argument("--out", type=Path, default=Path("heatseg-ablation"))

    be = commands.add_parser("bench", help="time the operator and fit complexity slopes")
    be.add_argument("--sizes", type=_sizes, default=DEFAULT_SIZES, help="grid sides, e.g. 64,128,256,512")
    be.add_argument("--mixer-sizes", type=_sizes, default=DEFAULT_MIXER_SIZES)
    be.add_argument("--scan-lengths", type=_sizes, default=DEFAULT_SCAN_LENGTHS, help="sequence lengths for the scan")
    be.add_argument("--repeats", type=int, default=5)
    be.add_argument("--seed", type=int, default=0)
    be.add_argument("--out", type=Path, default=Path("heatseg-bench"))

    ch = commands.add_parser("check", help="run the numerical property checks")
    ch.add_argument("--seed", type=int, default=0)
    return parser


def _load_cases(args: argparse.Namespace, net_config: NetworkConfig) -> tuple[NetworkConfig, list[Phantom]]:
    """
    Reads ``--data`` or generates the default phantom set at the config's patch size, and sizes the network's class
    count to the data.
    """
    if args.data is None:
        cases = generate_phantoms(DEFAULT_CASES, net_config.patch_size, net_config.num_classes, DEFAULT_DATA_SEED)
        return net_config, cases
    dataset = read_dataset(args.data)
    if dataset.shape != net_config.patch_size:
        raise DatasetError(f"Dataset shape {dataset.shape} does not match patch size {net_config.patch_size}")
    return NetworkConfig.from_dict({**net_config.to_dict(), "num_classes": dataset.classes}), dataset.cases


def _optimizer(args: argparse.Namespace, net_config: NetworkConfig) -> OptimizerConfig:
    return OptimizerConfig(args.optimizer, args.lr, weight_decay=args.weight_decay, batch_size=net_config.batch_size)


def cmd_gen(args: argparse.Namespace) -> int:
    shape = parse_shape(args.shape)
    phantoms = generate_phantoms(args.count, shape, args.classes, args.seed)
    write_dataset(args.out, phantoms, args.seed, args.classes)
    print(f"wrote {len(phantoms)} cases to {args.out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    net_config = load_preset(args.config)
    if args.variant is not None:
        net_config = net_config.with_variant(args.variant)
    net_config, cases = _load_cases(args, net_config)
    args.out.mkdir(parents=True, exist_ok=True)
    network = build(net_config, seed=args.seed)
    checkpoint = args.out / "checkpoint.zip"
    report = train(network, cases, _optimizer(args, net_config), args.epochs, seed=args.seed, checkpoint=checkpoint)
    report.to_csv(args.out / "training.csv")
    net_config.to_json(args.out / "config.json")
    final = "no epochs"
    if report.losses:
        final = f"final loss {report.losses[-1]:.6f}, train DSC {report.train_dsc[-1]:.4f}"
    print(f"{DISPLAY_NAMES[net_config.variant]}: {final}; checkpoint {checkpoint}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    network = load_network(args.checkpoint)
    dataset = read_dataset(args.data)
    report = evaluate(network, dataset.cases, network.config.num_classes, args.tolerance)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        report.to_json(args.out / "metrics.json")
        report.to_csv(args.out / "metrics.csv")
    print(f"mean DSC: {report.mean_dsc:.4f}")
    print(f"mean NSD: {report.mean_nsd:.4f}")
    return 0


@dataclass(frozen=True)
class AblationRow:
    variant: str
    dsc: float
    dsc_std: float
    nsd: float
    nsd_std: float

    @classmethod
    def from_report(cls, variant: str, report: MetricReport) -> AblationRow:
        return cls(variant, report.mean_dsc, report.dsc_std, report.mean_nsd, report.nsd_std)


def format_ablation(rows: Sequence[AblationRow]) -> str:
    """
    Markdown table with ``mean ± std`` columns, followed by the full-scale reference numbers.
    """
    lines = ["| Variant | DSC | NSD |", "|---|---|---|"]
    for row in rows:
        lines.append(
            f"| {DISPLAY_NAMES[row.variant]} "
            f"| {row.dsc:.4f} ± {row.dsc_std:.4f} | {row.nsd:.4f} ± {row.nsd_std:.4f} |"
        )
    lines += [
        "",
        "Reference: full-scale abdominal CT results (1000 epochs, clinical data); not reproduced here.",
        "",
        "| Variant | DSC | NSD |",
        "|---|---|---|",
    ]
    for variant, (ref_dsc, ref_nsd) in REFERENCE_ABLATION.items():
        lines.append(f"| {DISPLAY_NAMES[variant]} | {ref_dsc} | {ref_nsd} |")
    return "\n".join(lines) + "\n"


def write_ablation(path: Union[str, Path], rows: Sequence[AblationRow]) -> None:
    with Path(path).open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["variant", "DSC", "DSC_std", "NSD", "NSD_std"])
        for row in rows:
            writer.writerow([row.variant, repr(row.dsc), repr(row.dsc_std), repr(row.nsd), repr(row.nsd_std)])


def read_ablation(path: Union[str, Path]) -> list[AblationRow]:
    with Path(path).open(newline="") as f:
        return [
            AblationRow(r["variant"], float(r["DSC"]), float(r["DSC_std"]), float(r["NSD"]), float(r["NSD_std"]))
            for r in csv.DictReader(f)
        ]


def cmd_ablate(args: argparse.Namespace) -> int:
    net_config, cases = _load_cases(args, load_preset(args.config))
    train_cases, validation = split_cases(cases, seed=args.seed)
    if not validation:
        logger.warning("Validation split is empty, scoring on the training cases")
        validation = train_cases
    args.out.mkdir(parents=True, exist_ok=True)
    rows = []
    for variant in ABLATION_VARIANTS:
        variant_config = net_config.with_variant(variant)
        logger.info("Training %s", DISPLAY_NAMES[variant])
        network = build(variant_config, seed=args.seed)
        train(network, train_cases, _optimizer(args, variant_config), args.epochs, seed=args.seed)
        report = evaluate(network, validation, variant_config.num_classes, args.tolerance)
        rows.append(AblationRow.from_report(variant, report))
    table = format_ablation(rows)
    write_ablation(args.out / "ablation.csv", rows)
    (args.out / "ablation.md").write_text(table)
    print(table, end="")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    if len(args.sizes) < 4:
        raise UsageError(f"--sizes needs at least 4 grid sizes, got {len(args.sizes)}")
    if args.repeats < 5:
        raise UsageError(f"--repeats must be at least 5, got {args.repeats}")
    records = (
        bench_hco(args.sizes, args.repeats, "matmul", args.seed)
        + bench_hco(args.sizes, args.repeats, "fft", args.seed)
        + bench_spatial_oracle(args.sizes, args.repeats, seed=args.seed)
        + bench_quadratic_mixer(args.mixer_sizes, args.repeats, args.seed)
        + bench_scan(args.scan_lengths, args.repeats, seed=args.seed)
    )
    fits = fit_slopes(records)
    args.out.mkdir(parents=True, exist_ok=True)
    write_records(args.out / "bench.csv", records)
    write_slopes(args.out / "slopes.json", fits)
    for fit in fits:
        print(f"{fit.method}: slope {fit.slope:.3f}, R^2 {fit.r_squared:.4f}")
    return 0


def cmd_check(args: argparse.Namespace) -> int:
    results = run_checks(args.seed)
    for result in results:
        status = "PASS" if result.passed else "FAIL"
        print(f"{status} {result.name} (error {result.error:.3e}, limit {result.threshold:.0e})")
    return 0 if all(r.passed for r in results) else CHECKS_FAILED


COMMANDS: dict[str, Callable[[argparse.Namespace], int]] = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "bench": cmd_bench,
    "check": cmd_check,
}


def _exit_code(error: BaseException) -> Optional[int]:
    for kind, code in EXIT_CODES:
        if isinstance(error, kind):
            return code
    return None


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = make_parser().parse_args(argv)
        level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
        logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        return COMMANDS[args.command](args)
    except Exception as e:
        code = _exit_code(e)
        if code is None:
            raise
        print(json.dumps({"error": type(e).__name__, "code": code, "message": str(e)}), file=sys.stderr)
        return code
