"""Experiment runner: capture generation, attacks, evaluation and sweeps."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .capture_io import load_capture, save_capture
from .datasets import CIFAR_DIM, CIFAR_SHAPE, load_dataset, source_from_dict
from .disagg import AttackConfig, ReconstructionReport, run_attack
from .errors import ConfigError, NoGroundTruthError
from .flsim import (
    DPSGD, FEDAVG, FEDSGD, GradientCapture, MlpModel, Protocol,
    capture_dpsgd, capture_fedavg, capture_fedsgd, init_mlp,
)
from .metrics import match_and_score
from .rounding import RoundingConfig
from .sphere import OptimizerConfig, PGD_SCHEDULE, RADAM_SCHEDULE, PGD

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
THRESHOLDS = {FEDSGD: 90.0, DPSGD: 25.0, FEDAVG: 25.0}
# zero-mean Gaussian with the same RMS as CIFAR-10 pixels scaled to [0, 1]
DEFAULT_DATASET = {"kind": "synthetic", "n": CIFAR_DIM, "std": 0.5, "seed": 0, "count": 10000}


def derive_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence([master, index]).generate_state(1)[0])


@dataclass
class ExperimentConfig:
    dataset: dict = field(default_factory=lambda: dict(DEFAULT_DATASET))
    width: int = 200
    hidden_layers: int = 3
    classes: int = 10
    model_seed: int = 0
    model_weights: str | None = None
    protocol: dict = field(default_factory=lambda: {"kind": FEDSGD})
    batch_size: int = 20
    batches: int = 100
    seed: int = 0
    loss: str = "l1"
    optimizer: str = "radam"
    restarts: int = 10000
    steps: int = 500
    schedule: list | None = None
    tau: float = 0.35
    mu: float | None = None
    rounding: bool | None = None
    r_factor: float | None = None
    zero_tol: float | None = None
    b_override: int | None = None
    early_stop: bool = True
    chunk_size: int = 512
    threshold: float | None = None
    peak: float = 1.0
    out: str = "out"

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.batches < 1 or self.width < 1:
            raise ConfigError("batch size, batch count and width must be positive")
        Protocol.from_dict(self.protocol)

    @property
    def protocol_obj(self) -> Protocol:
        return Protocol.from_dict(self.protocol)

    def effective_threshold(self) -> float:
        return self.threshold if self.threshold is not None else THRESHOLDS[self.protocol_obj.kind]

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **dataclasses.asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"config schema version {version} is not supported")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc

    def attack_config(self, seed: int) -> AttackConfig:
        schedule = self.schedule or (PGD_SCHEDULE if self.optimizer == PGD else RADAM_SCHEDULE)
        opt = OptimizerConfig(
            method=self.optimizer, steps=self.steps, schedule=schedule, restarts=self.restarts,
            seed=seed, chunk_size=self.chunk_size,
        )
        rcfg = RoundingConfig(r_factor=self.r_factor) if self.r_factor is not None else None
        return AttackConfig(
            loss=self.loss, mu=self.mu, optimizer=opt, rounding=self.rounding, rounding_cfg=rcfg,
            tau=self.tau, zero_tol=self.zero_tol, b_override=self.b_override, early_stop=self.early_stop,
        )


def build_model(cfg: ExperimentConfig, n: int) -> MlpModel:
    if cfg.model_weights:
        model = MlpModel.load(cfg.model_weights)
        if model.input_dim != n:
            raise ConfigError(f"loaded model expects {model.input_dim} inputs, dataset has {n}")
        return model
    return init_mlp(n, cfg.width, cfg.hidden_layers, cfg.classes, cfg.model_seed)


def make_capture(model: MlpModel, X: np.ndarray, labels: np.ndarray, protocol: Protocol, seed: int) -> GradientCapture:
    if protocol.kind == FEDAVG:
        return capture_fedavg(model, X, labels, protocol.epochs, protocol.mini_batch, protocol.lr, seed)
    if protocol.kind == DPSGD:
        return capture_dpsgd(model, X, labels, protocol.clip, protocol.sigma, seed)
    return capture_fedsgd(model, X, labels, seed)


def iter_captures(cfg: ExperimentConfig):
    """Yield (batch index, seed, capture) for every batch of the experiment."""
    dataset = load_dataset(source_from_dict(cfg.dataset))
    if cfg.batch_size > len(dataset):
        raise ConfigError(f"batch size {cfg.batch_size} exceeds dataset size {len(dataset)}")
    model = build_model(cfg, dataset.dim)
    protocol = cfg.protocol_obj
    for i in range(cfg.batches):
        seed = derive_seed(cfg.seed, i)
        rng = np.random.default_rng(seed)
        X, labels = dataset.batch(rng.choice(len(dataset), cfg.batch_size, replace=False))
        yield i, seed, make_capture(model, X, labels, protocol, seed)


def generate(cfg: ExperimentConfig, out_dir=None) -> Path:
    """Write one capture file per batch plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, seed, cap in iter_captures(cfg):
        path = out / f"capture_{i:04d}.spgc"
        save_capture(cap, path)
        entries.append({
            "file": path.name, "batch_index": i, "seed": seed,
            "sha256": hashlib.sha256(path.read_bytes()).hexdigest(),
        })
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps({"config": cfg.to_dict(), "captures": entries}, indent=2) + "\n")
    return manifest


def attack_one(cap: GradientCapture, attack: AttackConfig, threads: int = 1, peak: float = 1.0) -> ReconstructionReport:
    report = run_attack(cap.without_truth(), attack, workers=threads)
    if cap.truth is not None and cap.truth.X.shape == report.X.shape:
        match = match_and_score(cap.truth.X, report.X, peak)
        report.psnr = [float(v) for v in match.psnr]
        report.psnr_mean = match.mean
    return report


def report_dict(report: ReconstructionReport, cap: GradientCapture, source: str | None = None) -> dict:
    d = report.to_json_dict()
    d["protocol"] = cap.protocol.to_dict()
    d["capture_seed"] = cap.seed
    if source is not None:
        d["capture"] = source
    return d


def capture_paths(paths) -> list[Path]:
    """Expand directories (via their manifest or ``*.spgc``) into capture files."""
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            manifest = p / "manifest.json"
            if manifest.exists():
                out += [p / e["file"] for e in json.loads(manifest.read_text())["captures"]]
            else:
                out += sorted(p.glob("*.spgc"))
        else:
            out.append(p)
    return out


def attack_files(paths, attack_for_seed, out_dir, threads: int = 1, peak: float = 1.0,
                 dump_images: bool = False) -> list[Path]:
    """Attack each capture file and write ``report_<stem>.json`` next to optional image dumps.

    ``attack_for_seed`` maps a capture's seed to the ``AttackConfig`` used for it.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for path in capture_paths(paths):
        cap = load_capture(path)
        report = attack_one(cap, attack_for_seed(cap.seed), threads, peak)
        target = out / f"report_{path.stem}.json"
        target.write_text(json.dumps(report_dict(report, cap, path.name), indent=2, sort_keys=True) + "\n")
        log.info("%s: lambda=%.4f psnr=%s", path.name, report.score.lam, report.psnr_mean)
        if dump_images:
            dump_batch_images(report.X, out / f"images_{path.stem}")
            if cap.truth is not None:
                dump_batch_images(cap.truth.X, out / f"images_{path.stem}_truth")
        written.append(target)
    return written


def _write_netpbm(path: Path, img: np.ndarray) -> None:
    pixels = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    magic = b"P6" if pixels.ndim == 3 else b"P5"
    h, w = pixels.shape[:2]
    path.write_bytes(magic + f"\n{w} {h}\n255\n".encode() + pixels.tobytes())


def dump_batch_images(X: np.ndarray, directory) -> list[Path]:
    """Write each column as an image clamped to [0, 1].

    3072-dim columns are CIFAR records (channel-major 3x32x32) written as PPM;
    other sizes are written as square PGM when possible, else a 1-pixel-high strip.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n, b = X.shape
    side = int(round(np.sqrt(n)))
    paths = []
    for j in range(b):
        x = X[:, j]
        if n == CIFAR_DIM:
            img, ext = x.reshape(CIFAR_SHAPE).transpose(1, 2, 0), "ppm"
        elif side * side == n:
            img, ext = x.reshape(side, side), "pgm"
        else:
            img, ext = x.reshape(1, n), "pgm"
        path = directory / f"{j:04d}.{ext}"
        _write_netpbm(path, img)
        paths.append(path)
    return paths


@dataclass
class EvaluationSummary:
    mean_psnr: float
    accuracy: float
    threshold: float
    rows: list

    def to_dict(self) -> dict:
        return {"mean_psnr": self.mean_psnr, "accuracy": self.accuracy, "threshold": self.threshold,
                "batches": len(self.rows), "rows": self.rows}


def summarize(rows: list[dict], threshold: float) -> EvaluationSummary:
    """Mean of per-batch average PSNR, and the fraction of batches above ``threshold``."""
    if not rows:
        raise NoGroundTruthError("no batches to evaluate")
    psnrs = np.array([r["psnr_mean"] for r in rows], dtype=np.float64)
    return EvaluationSummary(float(psnrs.mean()), float(np.mean(psnrs > threshold)), float(threshold), rows)


def evaluate_reports(paths, threshold: float | None = None) -> EvaluationSummary:
    rows = []
    kinds = set()
    for path in map(Path, paths):
        d = json.loads(path.read_text())
        if d.get("psnr_mean") is None:
            raise NoGroundTruthError(f"{path}: report has no ground-truth PSNR")
        kinds.add(d.get("protocol", {}).get("kind", FEDSGD))
        rows.append({"report": path.name, "psnr_mean": d["psnr_mean"], "lambda": d["lambda"],
                     "b": d["b"], "m": d["m"]})
    if threshold is None:
        threshold = min(THRESHOLDS[k] for k in kinds) if kinds else THRESHOLDS[FEDSGD]
    summary = summarize(rows, threshold)
    for r in summary.rows:
        r["passed"] = bool(r["psnr_mean"] > threshold)
    return summary


TABLE_HEADER = ["method", "b", "m", "PSNR", "Acc"]


def table_row(label: str, b: int, m: int, summary: EvaluationSummary) -> list:
    return [label, b, m, f"{summary.mean_psnr:.2f}", f"{100.0 * summary.accuracy:.0f}"]


def write_table(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_HEADER)
        w.writerows(rows)


def run_experiment(cfg: ExperimentConfig, threads: int = 1) -> tuple[EvaluationSummary, list[dict]]:
    """Generate, attack and evaluate every batch in memory."""
    reports = []
    for i, seed, cap in iter_captures(cfg):
        report = attack_one(cap, cfg.attack_config(seed), threads, cfg.peak)
        d = report_dict(report, cap)
        d["batch_index"] = i
        reports.append(d)
    rows = [{"report": f"batch_{d['batch_index']:04d}", "psnr_mean": d["psnr_mean"], "lambda": d["lambda"],
             "b": d["b"], "m": d["m"]} for d in reports]
    return summarize(rows, cfg.effective_threshold()), reports


def bench(cfg: ExperimentConfig, losses, optimizers, batch_sizes, threads: int = 1) -> list[list]:
    """Loss/optimizer sweep; one table row per (loss, optimizer, b)."""
    rows = []
    for loss in losses:
        for opt in optimizers:
            for b in batch_sizes:
                sub = dataclasses.replace(cfg, loss=loss, optimizer=opt, batch_size=b, schedule=None)
                summary, _ = run_experiment(sub, threads)
                rows.append(table_row(f"{loss}/{opt}", b, cfg.width, summary))
                log.info("bench %s/%s b=%d: psnr=%.2f acc=%.2f", loss, opt, b, summary.mean_psnr, summary.accuracy)
    return rows
