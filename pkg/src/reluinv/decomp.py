"""Preconditioned low-rank factorization of the observed weight gradient."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import RankError

CLEAN_RANK_TOL = 1e-9


@dataclass
class LowRankPair:
    L: np.ndarray  # (m, b), orthonormal columns
    R: np.ndarray  # (b, n)
    b: int
    singular_values: np.ndarray
    residual: float  # ||L R - dW||_F / ||dW||_F


def estimate_batch_rank(singular_values, tol_rel: float = CLEAN_RANK_TOL, noisy: bool = False) -> int:
    """Batch size guess from a descending spectrum.

    Clean spectra: number of values above ``tol_rel * s[0]``.  Noisy spectra:
    position of the largest log-gap s[k-1] / s[k] with k in [1, len / 2].
    Returns 0 for an all-zero spectrum.
    """
    s = np.asarray(singular_values, dtype=np.float64)
    if s.size == 0 or s[0] <= 0:
        return 0
    if not noisy:
        return int(np.count_nonzero(s > tol_rel * s[0]))
    kmax = max(1, s.size // 2)
    floor = s[0] * np.finfo(np.float64).tiny
    logs = np.log(np.maximum(s, floor))
    gaps = logs[:kmax] - logs[1:kmax + 1]
    return int(np.argmax(gaps)) + 1


def _fix_signs(U: np.ndarray, Vt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # largest-magnitude entry of every left singular vector made positive
    pivots = U[np.argmax(np.abs(U), axis=0), np.arange(U.shape[1])]
    signs = np.where(pivots < 0, -1.0, 1.0)
    return U * signs, Vt * signs[:, None]


def initial_decomposition(
    dW: np.ndarray, b_override: int | None = None, noisy: bool = False, tol_rel: float = CLEAN_RANK_TOL
) -> LowRankPair:
    dW = np.asarray(dW, dtype=np.float64)
    if dW.ndim != 2 or min(dW.shape) < 1:
        raise RankError(f"gradient must be a non-empty matrix, got shape {dW.shape}")
    if not np.all(np.isfinite(dW)):
        raise RankError("gradient contains non-finite entries")
    U, s, Vt = np.linalg.svd(dW, full_matrices=False)
    b = int(b_override) if b_override is not None else estimate_batch_rank(s, tol_rel, noisy)
    if b > min(dW.shape):
        raise RankError(f"rank {b} exceeds min(m, n) = {min(dW.shape)}")
    if b < 0:
        raise RankError("rank must be non-negative")
    U, Vt = _fix_signs(U[:, :b], Vt[:b])
    L = U
    R = s[:b, None] * Vt
    norm = np.linalg.norm(dW)
    residual = float(np.linalg.norm(L @ R - dW) / norm) if norm > 0 else 0.0
    return LowRankPair(L, R, b, s, residual)
