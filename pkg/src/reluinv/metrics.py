"""PSNR and permutation matching between true and reconstructed batches."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

PSNR_CAP = 200.0


def psnr(x: np.ndarray, x_hat: np.ndarray, peak: float = 1.0) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    x_hat = np.asarray(x_hat, dtype=np.float64).ravel()
    if x.shape != x_hat.shape:
        raise ShapeError(f"length mismatch: {x.size} vs {x_hat.size}")
    if not peak > 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((x - x_hat) ** 2))
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(peak**2 / mse)))


@dataclass
class MatchResult:
    psnr: np.ndarray  # per true column
    assignment: np.ndarray  # assignment[i] = reconstruction column matched to true column i

    @property
    def mean(self) -> float:
        return float(np.mean(self.psnr))


def pairwise_mse(X: np.ndarray, X_hat: np.ndarray) -> np.ndarray:
    """(b, b) matrix of MSE between true column i and reconstructed column j."""
    return np.stack([np.mean((X_hat - X[:, [i]]) ** 2, axis=0) for i in range(X.shape[1])])


def match_and_score(X: np.ndarray, X_hat: np.ndarray, peak: float = 1.0) -> MatchResult:
    """Greedy lowest-MSE-first one-to-one matching of reconstructed to true columns."""
    X = np.asarray(X, dtype=np.float64)
    X_hat = np.asarray(X_hat, dtype=np.float64)
    if X.shape != X_hat.shape or X.ndim != 2:
        raise ShapeError(f"shape mismatch: {X.shape} vs {X_hat.shape}")
    b = X.shape[1]
    mse = pairwise_mse(X, X_hat)
    order = np.argsort(mse, axis=None, kind="stable")
    assignment = np.full(b, -1)
    used = np.zeros(b, dtype=bool)
    for flat in order:
        i, j = divmod(int(flat), b)
        if assignment[i] < 0 and not used[j]:
            assignment[i] = j
            used[j] = True
    scores = np.array([psnr(X[:, i], X_hat[:, assignment[i]], peak) for i in range(b)])
    return MatchResult(scores, assignment)
