"""Command-line entry point: ``reluinv generate|attack|evaluate|bench``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import (
    AttackPreconditionError, CaptureFormatError, ConfigError, IngestionError, NoGroundTruthError, RankError,
    ShapeError,
)
from .experiment import (
    DEFAULT_DATASET, ExperimentConfig, attack_files, bench, evaluate_reports, generate, table_row, write_table,
)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_ATTACK = 0, 1, 2, 3

# flag dest -> config key
_OVERRIDES = {
    "batch_size": "batch_size", "batches": "batches", "width": "width", "loss": "loss",
    "optimizer": "optimizer", "restarts": "restarts", "steps": "steps", "tau": "tau", "mu": "mu",
    "seed": "seed", "model_seed": "model_seed", "out": "out", "threshold": "threshold",
    "b_override": "b_override", "zero_tol": "zero_tol", "r_factor": "r_factor", "chunk_size": "chunk_size",
    "model_weights": "model_weights",
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config; flags override its keys")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", help="CIFAR-10 directory or .bin file, a .npy/.npz matrix, or 'synthetic'")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--batches", type=int)
    p.add_argument("--width", type=int, help="hidden layer width m")
    p.add_argument("--model-seed", type=int)
    p.add_argument("--model-weights", help=".npz weights saved by MlpModel.save")
    p.add_argument("--protocol", choices=["fedsgd", "fedavg", "dpsgd"])
    p.add_argument("--sigma", type=float, help="DP noise std")
    p.add_argument("--clip", type=float, help="DP clipping norm")
    p.add_argument("--epochs", type=int, help="FedAvg local epochs")
    p.add_argument("--mini-batch", type=int, help="FedAvg mini-batch size")
    p.add_argument("--lr", type=float, help="FedAvg local learning rate")


def _add_attack(p: argparse.ArgumentParser) -> None:
    p.add_argument("--loss", choices=["l1", "logcosh", "negl4"])
    p.add_argument("--optimizer", choices=["radam", "pgd"])
    p.add_argument("--restarts", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--mu", type=float)
    p.add_argument("--r-factor", type=float)
    p.add_argument("--zero-tol", type=float)
    p.add_argument("--b-override", type=int)
    p.add_argument("--chunk-size", type=int)
    p.add_argument("--no-early-stop", action="store_true")
    p.add_argument("--threads", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reluinv", description="Gradient inversion of ReLU linear layers")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate client rounds and write capture files")
    _add_common(g)
    _add_data(g)

    a = sub.add_parser("attack", help="reconstruct inputs from capture files")
    _add_common(a)
    _add_attack(a)
    a.add_argument("captures", nargs="+", help="capture files or directories")
    a.add_argument("--dump-images", action="store_true")

    e = sub.add_parser("evaluate", help="aggregate reports into PSNR / accuracy")
    e.add_argument("reports", nargs="+")
    e.add_argument("--threshold", type=float)
    e.add_argument("--label", default="attack")
    e.add_argument("--out", help="directory for summary.json and table.csv")
    e.add_argument("-v", "--verbose", action="store_true")

    bch = sub.add_parser("bench", help="loss/optimizer sweep producing a results table")
    _add_common(bch)
    _add_data(bch)
    _add_attack(bch)
    bch.add_argument("--losses", default="l1", help="comma-separated")
    bch.add_argument("--optimizers", default="radam", help="comma-separated")
    bch.add_argument("--batch-sizes", default="20", help="comma-separated")
    bch.add_argument("--threshold", type=float)
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    base = ExperimentConfig.load(args.config).to_dict() if getattr(args, "config", None) else {}
    for dest, key in _OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            base[key] = value
    if getattr(args, "no_early_stop", False):
        base["early_stop"] = False
    dataset = getattr(args, "dataset", None)
    if dataset is not None:
        if dataset == "synthetic":
            base["dataset"] = dict(DEFAULT_DATASET)
        elif dataset.endswith((".npy", ".npz")):
            base["dataset"] = {"kind": "matrix", "path": dataset}
        else:
            base["dataset"] = {"kind": "cifar10", "path": dataset}
    kind = getattr(args, "protocol", None)
    protocol = dict(base.get("protocol", {"kind": "fedsgd"}))
    if kind is not None and kind != protocol.get("kind"):
        protocol = {"kind": kind}
    if protocol["kind"] == "dpsgd":
        protocol.setdefault("clip", 2.0)
        protocol.setdefault("sigma", 1e-4)
        for dest, key in (("clip", "clip"), ("sigma", "sigma")):
            if getattr(args, dest, None) is not None:
                protocol[key] = getattr(args, dest)
    elif protocol["kind"] == "fedavg":
        protocol.setdefault("epochs", 3)
        protocol.setdefault("mini_batch", 5)
        protocol.setdefault("lr", 1e-2)
        for dest, key in (("epochs", "epochs"), ("mini_batch", "mini_batch"), ("lr", "lr")):
            if getattr(args, dest, None) is not None:
                protocol[key] = getattr(args, dest)
    base["protocol"] = protocol
    return ExperimentConfig.from_dict(base)


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "generate":
        cfg = config_from_args(args)
        manifest = generate(cfg)
        print(manifest)
    elif args.command == "attack":
        cfg = config_from_args(args)
        reports = attack_files(args.captures, cfg.attack_config, cfg.out, args.threads, cfg.peak, args.dump_images)
        for r in reports:
            print(r)
    elif args.command == "evaluate":
        summary = evaluate_reports(args.reports, args.threshold)
        out = Path(args.out) if args.out else None
        text = json.dumps(summary.to_dict(), indent=2)
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / "summary.json").write_text(text + "\n")
            first = summary.rows[0]
            write_table(out / "table.csv", [table_row(args.label, first["b"], first["m"], summary)])
        print(f"mean PSNR {summary.mean_psnr:.2f} dB, accuracy {100 * summary.accuracy:.1f}% "
              f"(threshold {summary.threshold:g} dB, {len(summary.rows)} batches)")
    elif args.command == "bench":
        cfg = config_from_args(args)
        if args.threshold is not None:
            cfg.threshold = args.threshold
        rows = bench(cfg, args.losses.split(","), args.optimizers.split(","), _csv_ints(args.batch_sizes), args.threads)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        write_table(out / "bench.csv", rows)
        print(out / "bench.csv")
    return EXIT_OK


def main(argv=None) -> int:
    try:
        return run(argv)
    except (ConfigError, NoGroundTruthError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestionError, CaptureFormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (AttackPreconditionError, RankError) as exc:
        print(f"attack precondition error: {exc}", file=sys.stderr)
        return EXIT_ATTACK


if __name__ == "__main__":
    sys.exit(main())
