"""Rounding an approximate sparse direction to an exact one by kernel extraction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass
class RoundingConfig:
    r_factor: float = 1.5
    samples: int = 1
    kernel_tol: float = 1e-8

    def __post_init__(self) -> None:
        if self.r_factor < 1 or self.samples < 1 or self.kernel_tol <= 0:
            raise ConfigError("need r_factor >= 1, samples >= 1 and a positive kernel tolerance")

    @classmethod
    def for_width(cls, m: int, **kw) -> "RoundingConfig":
        return cls(r_factor=3.0 if m == 200 else 1.5, **kw)

    def pool_size(self, b: int, m: int) -> int:
        r = int(round(self.r_factor * b))
        if r < b or r > m:
            raise ConfigError(f"candidate pool size r={r} must satisfy b={b} <= r <= m={m}")
        return r

    def to_dict(self) -> dict:
        return {"r_factor": self.r_factor, "samples": self.samples, "kernel_tol": self.kernel_tol}


def kernel_direction(L_A: np.ndarray, tol: float = 1e-8) -> np.ndarray | None:
    """Unit spanning vector of ker(L_A) if that kernel is exactly one-dimensional."""
    L_A = np.atleast_2d(np.asarray(L_A, dtype=np.float64))
    b = L_A.shape[1]
    _, s, Vt = np.linalg.svd(L_A, full_matrices=True)
    smax = s[0] if s.size else 0.0
    # rows < b leave missing singular values, which are zero
    nullity = b - s.size + int(np.count_nonzero(s <= tol * smax))
    if nullity != 1:
        return None
    return Vt[-1].copy()


def round_via_sampling(
    L: np.ndarray, q_hat: np.ndarray, cfg: RoundingConfig, rng: np.random.Generator
) -> np.ndarray | None:
    m, b = L.shape
    r = cfg.pool_size(b, m)
    y = L @ q_hat
    closest = np.argsort(np.abs(y), kind="stable")[:r]
    for _ in range(cfg.samples):
        rows = rng.choice(closest, size=b, replace=False)
        q = kernel_direction(L[rows], cfg.kernel_tol)
        if q is not None:
            return q if q @ q_hat >= 0 else -q
    return None
