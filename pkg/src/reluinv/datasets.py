"""Data sources for the simulator: CIFAR-10 binary batches, synthetic Gaussian, raw matrices."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, IngestionError

CIFAR_RECORD = 3073
CIFAR_DIM = 3072
CIFAR_SHAPE = (3, 32, 32)


@dataclass(frozen=True)
class CifarSource:
    """Directory holding ``data_batch_*.bin`` / ``test_batch.bin``, or a single .bin file."""

    path: str


@dataclass(frozen=True)
class SyntheticSource:
    n: int = CIFAR_DIM
    std: float = 1.0
    seed: int = 0
    count: int = 1000
    classes: int = 10


@dataclass(frozen=True)
class MatrixSource:
    """``.npy`` with one datapoint per row, or ``.npz`` with arrays ``X`` and optional ``labels``."""

    path: str


@dataclass
class Dataset:
    data: np.ndarray  # (count, n)
    labels: np.ndarray  # (count,)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __iter__(self):
        return zip(self.data, self.labels)

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def batch(self, indices) -> tuple[np.ndarray, np.ndarray]:
        """Columns-as-datapoints matrix and labels for the given record indices."""
        idx = np.asarray(indices)
        return self.data[idx].T.copy(), self.labels[idx].copy()


def read_cifar_file(path: Path) -> Dataset:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        whole = raw.size // CIFAR_RECORD
        raise IngestionError(
            f"{path}: expected {(whole + 1) * CIFAR_RECORD} bytes ({whole + 1} records of {CIFAR_RECORD}), "
            f"got {raw.size}; record {whole} is incomplete at byte offset {whole * CIFAR_RECORD}"
        )
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise IngestionError(f"{path}: label byte {labels[bad]} out of range at byte offset {bad * CIFAR_RECORD}")
    data = records[:, 1:].astype(np.float64) / 255.0
    return Dataset(data, labels)


def _cifar_files(root: Path) -> list[Path]:
    if root.is_file():
        return [root]
    files = sorted(root.glob("data_batch_*.bin")) + sorted(root.glob("test_batch.bin"))
    if not files:
        raise IngestionError(f"{root}: no CIFAR-10 .bin batch files found")
    return files


def load_dataset(source) -> Dataset:
    if isinstance(source, SyntheticSource):
        if source.n < 1 or source.count < 1 or source.std <= 0:
            raise ConfigError("synthetic source needs positive n, count and std")
        rng = np.random.default_rng(source.seed)
        data = rng.normal(0.0, source.std, size=(source.count, source.n))
        labels = rng.integers(0, source.classes, size=source.count)
        return Dataset(data, labels)
    if isinstance(source, CifarSource):
        root = Path(source.path)
        if not root.exists():
            raise IngestionError(f"{root}: no such file or directory")
        parts = [read_cifar_file(p) for p in _cifar_files(root)]
        return Dataset(np.concatenate([p.data for p in parts]), np.concatenate([p.labels for p in parts]))
    if isinstance(source, MatrixSource):
        path = Path(source.path)
        if not path.exists():
            raise IngestionError(f"{path}: no such file")
        try:
            if path.suffix == ".npz":
                with np.load(path) as z:
                    data = np.asarray(z["X"], dtype=np.float64)
                    labels = np.asarray(z["labels"], dtype=np.int64) if "labels" in z.files else None
            else:
                data = np.asarray(np.load(path), dtype=np.float64)
                labels = None
        except (ValueError, KeyError, OSError) as exc:
            raise IngestionError(f"{path}: cannot read matrix ({exc})") from exc
        if data.ndim != 2:
            raise IngestionError(f"{path}: expected a 2-D matrix, got shape {data.shape}")
        if labels is None:
            labels = np.zeros(data.shape[0], dtype=np.int64)
        return Dataset(data, labels)
    raise ConfigError(f"unsupported dataset source {source!r}")


def source_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    if kind == "cifar10":
        return CifarSource(**d)
    if kind == "synthetic":
        return SyntheticSource(**d)
    if kind == "matrix":
        return MatrixSource(**d)
    raise ConfigError(f"unknown dataset kind {kind!r}")


def source_to_dict(source) -> dict:
    kind = {CifarSource: "cifar10", SyntheticSource: "synthetic", MatrixSource: "matrix"}[type(source)]
    return {"kind": kind, **source.__dict__}
